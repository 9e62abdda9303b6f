//! Per-frame regression from audio features to mesh vertices.
//!
//! A two-layer perceptron predicts vertex offsets that are added to a fixed
//! template. The second layer starts at zero so the untrained model outputs
//! the template itself.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::AudioFeatureSequence;
use crate::error::{Error, Result};
use crate::geometry::{FaceMesh, FaceTopology, MeshSequence};
use crate::learning::{l1_loss, Adam, AdamConfig, Grads, Graph, Initializer, Params, Tensor};
use crate::train::{check_loss, column_stats, normalize, LossHistory, TrainConfig};

pub const PREFIX: &str = "audio2mesh";

fn key(name: &str) -> String {
    format!("{PREFIX}.{name}")
}

/// Weights of the mesh regressor plus its dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshRegressor {
    pub params: Params,
    pub feature_dim: usize,
    pub hidden: usize,
    pub n_points: usize,
}

/// Audio features paired with target meshes, split for training and validation.
#[derive(Clone, Debug, Default)]
pub struct MeshDataset {
    pub train: Vec<(AudioFeatureSequence, MeshSequence)>,
    pub val: Vec<(AudioFeatureSequence, MeshSequence)>,
}

pub fn init_mesh_regressor(
    feature_dim: usize,
    topology: &FaceTopology,
    hidden: usize,
    seed: u64,
) -> Result<MeshRegressor> {
    if feature_dim == 0 || hidden == 0 {
        return Err(Error::InvalidArgument(
            "feature and hidden widths must be positive".into(),
        ));
    }
    topology.validate()?;
    let n = topology.n_points;
    let mut init = Initializer::new(seed);
    init.linear(&key("fc1"), feature_dim, hidden);
    init.linear_zero(&key("fc2"), hidden, 3 * n);
    let template = topology.canonical_mesh();
    init.tensor(key("template"), Tensor::new(&[n, 3], template.flat())?);
    init.zeros(key("norm.mean"), &[feature_dim]);
    init.tensor(key("norm.std"), Tensor::ones(&[feature_dim]));
    MeshRegressor::from_params(init.finish())
}

impl MeshRegressor {
    /// Rebuilds the model from a parameter store, checking every shape.
    pub fn from_params(params: Params) -> Result<Self> {
        let w1 = params.get(&key("fc1.weight"))?.shape().to_vec();
        let w2 = params.get(&key("fc2.weight"))?.shape().to_vec();
        let tpl = params.get(&key("template"))?;
        if w1.len() != 2 || w2.len() != 2 || w2[0] != w1[1] || tpl.ndim() != 2 || tpl.shape()[1] != 3 {
            return Err(Error::dim(format!(
                "inconsistent mesh regressor shapes: fc1 {w1:?}, fc2 {w2:?}, template {:?}",
                tpl.shape()
            )));
        }
        let (feature_dim, hidden, n_points) = (w1[0], w1[1], tpl.shape()[0]);
        let expect = [
            ("fc1.bias", vec![hidden]),
            ("fc2.bias", vec![3 * n_points]),
            ("fc2.weight", vec![hidden, 3 * n_points]),
            ("norm.mean", vec![feature_dim]),
            ("norm.std", vec![feature_dim]),
        ];
        for (name, shape) in expect {
            let got = params.get(&key(name))?.shape();
            if got != shape.as_slice() {
                return Err(Error::dim(format!("`{}` has shape {got:?}, want {shape:?}", key(name))));
            }
        }
        if !tpl.is_finite() {
            return Err(Error::NonFinite("mesh template".into()));
        }
        Ok(Self {
            params: params.subtree(&format!("{PREFIX}.")),
            feature_dim,
            hidden,
            n_points,
        })
    }

    pub fn template(&self) -> FaceMesh {
        let t = self.params.get(&key("template")).expect("checked at construction");
        FaceMesh::from_flat(t.data()).expect("template is [N, 3]")
    }

    /// Vertex offsets `[rows, 3N]` for raw features `[rows, D]`.
    fn offsets(&self, g: &mut Graph, params: &Params, feats: &Tensor) -> Result<crate::learning::Var> {
        let x = g.constant(normalize(params, PREFIX, feats)?);
        let w1 = g.param(params, &key("fc1.weight"))?;
        let b1 = g.param(params, &key("fc1.bias"))?;
        let w2 = g.param(params, &key("fc2.weight"))?;
        let b2 = g.param(params, &key("fc2.bias"))?;
        let h = g.linear(x, w1, Some(b1))?;
        let h = g.relu(h);
        g.linear(h, w2, Some(b2))
    }

    fn check_features(&self, feats: &AudioFeatureSequence) -> Result<()> {
        if feats.dim() != self.feature_dim {
            return Err(Error::dim(format!(
                "audio features have width {}, mesh regressor expects {}",
                feats.dim(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Flat predicted meshes `[T, 3N]`.
    fn predict_flat(&self, feats: &AudioFeatureSequence) -> Result<Tensor> {
        self.check_features(feats)?;
        let mut g = Graph::inference();
        let off = self.offsets(&mut g, &self.params, &feats.frames)?;
        let tpl = self.params.get(&key("template"))?.data();
        let mut out = g.value(off).clone();
        for row in out.data_mut().chunks_mut(tpl.len()) {
            for (v, t) in row.iter_mut().zip(tpl) {
                *v += t;
            }
        }
        Ok(out)
    }
}

/// Per frame: `template + fc2(relu(fc1(f)))`, rounded to the `f32` grid
/// the parameters live on.
pub fn mesh_forward(model: &MeshRegressor, feats: &AudioFeatureSequence) -> Result<MeshSequence> {
    let mut flat = model.predict_flat(feats)?;
    flat.round_to_f32();
    let w = 3 * model.n_points;
    let frames = if flat.numel() == 0 {
        Vec::new()
    } else {
        flat.data().chunks(w).map(FaceMesh::from_flat).collect::<Result<_>>()?
    };
    MeshSequence::new(feats.fps, frames)
}

/// Frame-stacked features `[ΣT, D]` and targets `[ΣT, 3N]`.
fn stack(pairs: &[(AudioFeatureSequence, MeshSequence)], n_points: usize) -> Result<(Tensor, Tensor)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, (f, m)) in pairs.iter().enumerate() {
        if f.len() != m.len() {
            return Err(Error::LengthMismatch {
                left: f.len(),
                right: m.len(),
            });
        }
        if !m.is_empty() && m.n_points != n_points {
            return Err(Error::Topology(format!(
                "pair {i}: {} target vertices, model has {n_points}",
                m.n_points
            )));
        }
        xs.push(f.frames.clone());
        for frame in &m.frames {
            ys.extend(frame.flat());
        }
    }
    let x = Tensor::cat_outer(&xs)?;
    let rows = x.rows();
    Ok((x, Tensor::new(&[rows, 3 * n_points], ys)?))
}

fn minibatch_loss(model: &MeshRegressor, params: &Params, x: &Tensor, target: &Tensor) -> Result<(f64, Grads)> {
    let mut g = Graph::new();
    let off = model.offsets(&mut g, params, x)?;
    let tpl = params.get(&key("template"))?.data();
    let mut resid = target.clone();
    for row in resid.data_mut().chunks_mut(tpl.len()) {
        for (v, t) in row.iter_mut().zip(tpl) {
            *v -= t;
        }
    }
    let y = g.constant(resid);
    let loss = g.l1(off, y)?;
    let value = g.value(loss).data()[0];
    Ok((value, g.backward(loss)?.into_param_grads(params)))
}

/// Mean absolute offset error on raw features `[rows, D]` against target
/// vertices `[rows, 3N]`, with parameter gradients.
pub fn mesh_objective(model: &MeshRegressor, params: &Params, feats: &Tensor, target: &Tensor) -> Result<(f64, Grads)> {
    minibatch_loss(model, params, feats, target)
}

fn rows_of(t: &Tensor, idx: &[usize]) -> Tensor {
    let w = t.last_dim();
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
    }
    Tensor::new(&[idx.len(), w], data).expect("shape")
}

fn is_trainable(name: &str) -> bool {
    name.starts_with("audio2mesh.fc")
}

/// Minimises the mean absolute vertex error with Adam on random frame
/// minibatches. Feature normalisation statistics are taken from the training
/// split before the first step. An empty validation split validates on the
/// training frames.
pub fn train_audio2mesh(
    model: MeshRegressor,
    data: &MeshDataset,
    cfg: &TrainConfig,
) -> Result<(MeshRegressor, LossHistory)> {
    cfg.validate()?;
    let (x, y) = stack(&data.train, model.n_points)?;
    if x.rows() == 0 {
        return Err(Error::EmptyInput("audio2mesh training set has no frames".into()));
    }
    if x.last_dim() != model.feature_dim {
        return Err(Error::dim(format!(
            "training features have width {}, model expects {}",
            x.last_dim(),
            model.feature_dim
        )));
    }
    let (vx, vy) = if data.val.is_empty() {
        (x.clone(), y.clone())
    } else {
        stack(&data.val, model.n_points)?
    };

    let mut model = model;
    let (mean, std) = column_stats(&x);
    model.params.insert(key("norm.mean"), mean);
    model.params.insert(key("norm.std"), std);

    let val_loss = |m: &MeshRegressor| -> Result<f64> {
        let feats = AudioFeatureSequence {
            frames: vx.clone(),
            fps: 1.0,
            backbone_id: String::new(),
        };
        l1_loss(&m.predict_flat(&feats)?, &vy)
    };

    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut cursor = order.len();
    let mut history = LossHistory::default();
    for step in 0..cfg.steps {
        if history.wants_val(step, cfg) {
            let v = val_loss(&model)?;
            check_loss(step, v)?;
            history.val.push((step, v));
        }
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch.min(order.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let (loss, grads) = minibatch_loss(&model, &model.params, &rows_of(&x, &idx), &rows_of(&y, &idx))?;
        check_loss(step, loss)?;
        history.train.push(loss);
        adam.step(&mut model.params, &grads, is_trainable)?;
        model.params.round_to_f32();
        log::debug!("audio2mesh step {step}: train L1 {loss:.6}");
    }
    let v = val_loss(&model)?;
    check_loss(cfg.steps, v)?;
    if history.val.last().map(|p| p.0) != Some(cfg.steps) {
        history.val.push((cfg.steps, v));
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::gradcheck;
    use rand::Rng;

    fn feats(t: usize, d: usize, seed: u64) -> AudioFeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioFeatureSequence {
            frames: Tensor::new(&[t, d], (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            fps: 25.0,
            backbone_id: "test".into(),
        }
    }

    #[test]
    fn init_contract() {
        let topo = FaceTopology::desk();
        let m = init_mesh_regressor(8, &topo, 16, 3).unwrap();
        assert!(m.params.get("audio2mesh.fc2.weight").unwrap().data().iter().all(|&w| w == 0.0));
        let bound = 1.0 / 8f64.sqrt();
        assert!(m.params.get("audio2mesh.fc1.weight").unwrap().data().iter().all(|w| w.abs() <= bound));
        assert!(m.params.bit_eq(&init_mesh_regressor(8, &topo, 16, 3).unwrap().params));
        assert!(!m.params.bit_eq(&init_mesh_regressor(8, &topo, 16, 4).unwrap().params));
        assert!(init_mesh_regressor(0, &topo, 16, 3).is_err());
    }

    #[test]
    fn zero_head_reproduces_template() {
        let topo = FaceTopology::desk();
        let m = init_mesh_regressor(26, &topo, 32, 0).unwrap();
        let out = mesh_forward(&m, &feats(50, 26, 1)).unwrap();
        assert_eq!((out.len(), out.n_points), (50, 50));
        let tpl = topo.canonical_mesh();
        assert!(out.frames.iter().all(|f| *f == tpl));
    }

    #[test]
    fn hand_set_two_layer_map() {
        let topo = FaceTopology::desk();
        let mut m = init_mesh_regressor(1, &topo, 1, 0).unwrap();
        m.params.insert("audio2mesh.fc1.weight", Tensor::new(&[1, 1], vec![2.0]).unwrap());
        m.params.insert("audio2mesh.fc1.bias", Tensor::zeros(&[1]));
        m.params.insert("audio2mesh.fc2.weight", Tensor::ones(&[1, 150]));
        let f = AudioFeatureSequence {
            frames: Tensor::new(&[1, 1], vec![3.0]).unwrap(),
            fps: 25.0,
            backbone_id: "x".into(),
        };
        let out = mesh_forward(&m, &f).unwrap();
        let tpl = topo.canonical_mesh();
        for (v, t) in out.frames[0].vertices.iter().zip(&tpl.vertices) {
            for k in 0..3 {
                assert_eq!(v[k], (t[k] + 6.0) as f32 as f64);
            }
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let m = init_mesh_regressor(4, &FaceTopology::desk(), 8, 0).unwrap();
        assert!(matches!(mesh_forward(&m, &feats(3, 5, 0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn frames_are_independent() {
        let topo = FaceTopology::desk();
        let mut m = init_mesh_regressor(6, &topo, 8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        m.params.insert("audio2mesh.fc2.weight", Tensor::uniform(&[8, 150], 0.3, &mut rng));
        let f = feats(7, 6, 5);
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let permuted = AudioFeatureSequence {
            frames: rows_of(&f.frames, &perm),
            ..f.clone()
        };
        let a = mesh_forward(&m, &f).unwrap();
        let b = mesh_forward(&m, &permuted).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(b.frames[i], a.frames[p]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let topo = FaceTopology {
            n_points: 2,
            groups: vec![],
        };
        let mut init = Initializer::new(4);
        init.linear(&key("fc1"), 3, 8);
        init.linear(&key("fc2"), 8, 6);
        init.tensor(key("template"), Tensor::new(&[2, 3], vec![0.1, 0.2, 0.3, -0.1, 0.0, 0.5]).unwrap());
        init.zeros(key("norm.mean"), &[3]);
        init.tensor(key("norm.std"), Tensor::ones(&[3]));
        let m = MeshRegressor::from_params(init.finish()).unwrap();
        assert_eq!(m.n_points, topo.n_points);
        let x = feats(5, 3, 11).frames;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let y = Tensor::uniform(&[5, 6], 2.0, &mut rng);
        let report = gradcheck(|p| minibatch_loss(&m, p, &x, &y), &m.params, 1e-6, None).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn template_dataset() -> MeshDataset {
        let topo = FaceTopology::desk();
        let tpl = topo.canonical_mesh();
        let pair = |seed| {
            let f = feats(10, 4, seed);
            let m = MeshSequence::new(25.0, vec![tpl.clone(); 10]).unwrap();
            (f, m)
        };
        MeshDataset {
            train: vec![pair(1), pair(2)],
            val: vec![pair(3)],
        }
    }

    #[test]
    fn template_targets_are_already_optimal() {
        let m = init_mesh_regressor(4, &FaceTopology::desk(), 8, 0).unwrap();
        let cfg = TrainConfig {
            lr: 1e-3,
            steps: 20,
            batch: 4,
            val_every: 5,
            seed: 1,
        };
        let (_, h) = train_audio2mesh(m, &template_dataset(), &cfg).unwrap();
        assert!(h.train.iter().all(|&l| l == 0.0));
        assert!(h.val.iter().all(|&(_, l)| l == 0.0));
        assert_eq!(h.val.iter().map(|v| v.0).collect::<Vec<_>>(), vec![0, 5, 10, 15, 20]);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let topo = FaceTopology::desk();
        let mut data = template_dataset();
        for (f, m) in data.train.iter_mut().chain(data.val.iter_mut()) {
            for (t, frame) in m.frames.iter_mut().enumerate() {
                for v in &mut frame.vertices {
                    v[1] += 0.2 * f.row(t)[0];
                }
            }
        }
        let cfg = TrainConfig {
            lr: 1e-3,
            steps: 150,
            batch: 8,
            val_every: 50,
            seed: 7,
        };
        let run = || train_audio2mesh(init_mesh_regressor(4, &topo, 16, 5).unwrap(), &data, &cfg).unwrap();
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(h1, h2);
        assert!(m1.params.bit_eq(&m2.params));
        assert!(h1.final_val().unwrap() < h1.initial_val().unwrap());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let m = init_mesh_regressor(4, &FaceTopology::desk(), 8, 0).unwrap();
        let err = train_audio2mesh(m, &MeshDataset::default(), &TrainConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn non_finite_loss_reports_step() {
        let mut data = template_dataset();
        data.train[0].1.frames[0].vertices[0][0] = f64::INFINITY;
        data.val.clear();
        let m = init_mesh_regressor(4, &FaceTopology::desk(), 8, 0).unwrap();
        let err = train_audio2mesh(m, &data, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err:?}");
    }
}
