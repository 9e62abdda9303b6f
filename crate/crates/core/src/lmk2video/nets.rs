use std::sync::Arc;

use crate::error::{Error, Result};
use crate::learning::{sinusoid_embedding, Grads, Graph, Initializer, Params, Tensor, Var};
use crate::lmk2video::Lmk2VideoConfig;

pub const MOTION_PREFIX: &str = "motion.";

/// Latents of the frames of one clip, `[F, C, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentClip {
    pub latents: Tensor,
}

impl LatentClip {
    pub fn new(latents: Tensor) -> Result<Self> {
        if latents.ndim() != 4 || !latents.is_finite() {
            return Err(Error::dim(format!(
                "latent clip must be a finite [F, C, h, w] tensor, got {:?}",
                latents.shape()
            )));
        }
        Ok(Self { latents })
    }

    pub fn frames(&self) -> usize {
        self.latents.shape()[0]
    }

    pub fn frame(&self, f: usize) -> Tensor {
        let s = self.latents.shape();
        self.latents.slice_outer(f, f + 1).reshape(&s[1..]).expect("shape")
    }
}

/// Conditioning for one denoiser call. `reference` holds one feature map per
/// spatial-attention site; `None` bypasses the reference concatenation.
/// `guidance` holds one map per down-path scale; `None` disables the
/// guidance pathway.
#[derive(Clone, Debug, Default)]
pub struct Conditioning {
    pub reference: Option<Vec<Tensor>>,
    pub guidance: Option<Vec<Tensor>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DenoiseOptions {
    pub motion: bool,
}

/// All weights of the video generator, under the prefixes `backbone.`,
/// `refnet.`, `poseguider.` and `motion.`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoModel {
    pub params: Params,
    pub config: Lmk2VideoConfig,
}

/// Backbone residual blocks in execution order and their level.
const RES_LEVELS: [usize; 6] = [0, 1, 2, 2, 1, 0];
/// The reference network mirrors the first four.
const REF_BLOCKS: usize = 4;

struct Dims {
    latent: usize,
    ch: [usize; 3],
    temb: usize,
    guide: [usize; 3],
    stems: usize,
}

fn dims(cfg: &Lmk2VideoConfig) -> Dims {
    let b = cfg.base_channels;
    let g = cfg.guider_channels;
    Dims {
        latent: cfg.latent_channels(),
        ch: [b, 2 * b, 4 * b],
        temb: 2 * b,
        guide: [g, 2 * g, 4 * g],
        stems: cfg.latent_factor.trailing_zeros() as usize,
    }
}

fn attn_params(init: &mut Initializer, prefix: &str, d: usize, zero_out: bool) {
    for p in ["q", "k", "v"] {
        init.linear(&format!("{prefix}.{p}"), d, d);
    }
    if zero_out {
        init.linear_zero(&format!("{prefix}.o"), d, d);
    } else {
        init.linear(&format!("{prefix}.o"), d, d);
    }
}

/// Seeded initialisation. Guidance projections and motion output
/// projections start at exactly zero; the reference network starts as a copy
/// of the matching backbone weights.
pub fn init_video_model(cfg: &Lmk2VideoConfig, seed: u64) -> Result<VideoModel> {
    cfg.validate()?;
    let d = dims(cfg);
    let mut init = Initializer::new(seed);
    init.linear("backbone.time.fc1", cfg.base_channels, d.temb);
    init.linear("backbone.time.fc2", d.temb, d.temb);
    init.conv("backbone.conv_in", d.latent, d.ch[0], 3);
    for (i, &lvl) in RES_LEVELS.iter().enumerate() {
        let c = d.ch[lvl];
        init.conv(&format!("backbone.res{i}.conv1"), c, c, 3);
        init.conv(&format!("backbone.res{i}.conv2"), c, c, 3);
        init.linear(&format!("backbone.res{i}.temb"), d.temb, c);
    }
    init.conv("backbone.down0", d.ch[0], d.ch[1], 3);
    init.conv("backbone.down1", d.ch[1], d.ch[2], 3);
    attn_params(&mut init, "backbone.attn0", d.ch[2], false);
    attn_params(&mut init, "backbone.attn1", d.ch[2], false);
    init.conv("backbone.up1", d.ch[2], d.ch[1], 3);
    init.conv("backbone.up0", d.ch[1], d.ch[0], 3);
    init.conv("backbone.conv_out", d.ch[0], d.latent, 3);

    let mut cin = 3;
    for s in 0..d.stems {
        init.conv(&format!("poseguider.stem{s}"), cin, d.guide[0], 3);
        cin = d.guide[0];
    }
    attn_params(&mut init, "poseguider.xattn", d.guide[0], false);
    init.conv("poseguider.f1", d.guide[0], d.guide[1], 3);
    init.conv("poseguider.f2", d.guide[1], d.guide[2], 3);
    for s in 0..3 {
        init.conv_zero(&format!("poseguider.proj{s}"), d.guide[s], d.ch[s], 1);
    }

    for (i, &lvl) in RES_LEVELS.iter().enumerate() {
        attn_params(&mut init, &format!("motion.m{i}"), d.ch[lvl], true);
    }

    let mut params = init.finish();
    let copies: Vec<(String, Tensor)> = params
        .iter()
        .filter_map(|(name, t)| {
            let rest = name.strip_prefix("backbone.")?;
            let mirrored = rest.starts_with("conv_in")
                || rest.starts_with("down")
                || rest.starts_with("attn0")
                || (0..REF_BLOCKS).any(|i| {
                    rest.starts_with(&format!("res{i}.conv"))
                });
            mirrored.then(|| (format!("refnet.{rest}"), t.clone()))
        })
        .collect();
    for (name, t) in copies {
        params.insert(name, t);
    }
    VideoModel::from_params(params, cfg)
}

fn to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(r, &[0, 2, 1])
}

fn from_tokens(g: &mut Graph, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(t).to_vec();
    let p = g.permute(t, &[0, 2, 1])?;
    g.reshape(p, &[s[0], s[2], h, w])
}

/// Values for one forward pass: the graph, the parameter store it reads and
/// the model geometry.
struct Ctx<'a> {
    g: &'a mut Graph,
    p: &'a Params,
    heads: usize,
}

impl Ctx<'_> {
    fn conv(&mut self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.g.param(self.p, &format!("{name}.weight"))?;
        let b = self.g.param(self.p, &format!("{name}.bias"))?;
        let k = self.g.shape(w)[2];
        self.g.conv2d(x, w, b, stride, k / 2)
    }

    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.g.param(self.p, &format!("{name}.weight"))?;
        let b = self.g.param(self.p, &format!("{name}.bias"))?;
        self.g.linear(x, w, Some(b))
    }

    fn res_block(&mut self, name: &str, x: Var, temb: Option<Var>) -> Result<Var> {
        let h = self.g.silu(x);
        let mut h = self.conv(&format!("{name}.conv1"), h, 1)?;
        if let Some(t) = temb {
            let shift = self.linear(&format!("{name}.temb"), t)?;
            h = self.g.add_channel_shift(h, shift)?;
        }
        let h = self.g.silu(h);
        let h = self.conv(&format!("{name}.conv2"), h, 1)?;
        self.g.add(x, h)
    }

    /// `x + Wo·attention(x, kv)` on token tensors.
    fn attention(&mut self, name: &str, x: Var, kv: Var, mask: Option<Arc<Vec<bool>>>, heads: usize) -> Result<Var> {
        let q = self.linear(&format!("{name}.q"), x)?;
        let k = self.linear(&format!("{name}.k"), kv)?;
        let v = self.linear(&format!("{name}.v"), kv)?;
        let a = self.g.attention(q, k, v, heads, mask)?;
        let o = self.linear(&format!("{name}.o"), a)?;
        self.g.add(x, o)
    }

    /// Spatial self-attention on `[N, C, H, W]`; reference tokens, when
    /// given, are appended to the keys and values.
    fn spatial_attention(&mut self, name: &str, x: Var, reference: Option<Var>) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let tok = to_tokens(self.g, x)?;
        let kv = match reference {
            Some(r) => {
                let rt = to_tokens(self.g, r)?;
                self.g.concat(&[tok, rt], 1)?
            }
            None => tok,
        };
        let heads = self.heads;
        let out = self.attention(name, tok, kv, None, heads)?;
        from_tokens(self.g, out, s[2], s[3])
    }

    /// Temporal attention across the `frames` consecutive samples of each
    /// clip, independently at every spatial position.
    fn motion(&mut self, name: &str, x: Var, frames: usize) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let b = n / frames;
        let r = self.g.reshape(x, &[b, frames, c, hw])?;
        let r = self.g.permute(r, &[0, 3, 1, 2])?;
        let tok = self.g.reshape(r, &[b * hw, frames, c])?;
        let pe: Vec<f64> = (0..frames).flat_map(|f| sinusoid_embedding(f as f64, c)).collect();
        let pe = self.g.constant(Tensor::new(&[b * hw, frames, c], pe.repeat(b * hw))?);
        let inp = self.g.add(tok, pe)?;
        let q = self.linear(&format!("{name}.q"), inp)?;
        let k = self.linear(&format!("{name}.k"), inp)?;
        let v = self.linear(&format!("{name}.v"), inp)?;
        let a = self.g.attention(q, k, v, self.heads, None)?;
        let o = self.linear(&format!("{name}.o"), a)?;
        let out = self.g.add(tok, o)?;
        let out = self.g.reshape(out, &[b, hw, frames, c])?;
        let out = self.g.permute(out, &[0, 2, 3, 1])?;
        self.g.reshape(out, &[n, c, s[2], s[3]])
    }
}

/// Graph-level inputs of one batched backbone pass.
pub(crate) struct BackboneInputs<'a> {
    /// Noisy latents `[N, C, h, w]`, `N = clips × frames`.
    pub x: Var,
    /// Timestep of each of the `N` samples.
    pub t: &'a [usize],
    pub frames: usize,
    /// Per-clip reference maps, broadcast to the clip's frames.
    pub reference: Option<[Var; 2]>,
    /// Per-sample guidance maps.
    pub guidance: Option<[Var; 3]>,
    pub motion: bool,
}

/// Inputs of [`VideoModel::probe_objective`]: `N = clips × frames` noisy
/// latents with per-sample timesteps, and per-clip references.
#[derive(Clone, Debug)]
pub struct ProbeInputs {
    pub x: Tensor,
    pub t: Vec<usize>,
    pub frames: usize,
    pub ref_latent: Tensor,
    pub poses: Tensor,
    pub ref_pose: Tensor,
    pub motion: bool,
}

impl VideoModel {
    pub fn from_params(params: Params, cfg: &Lmk2VideoConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Self {
            params,
            config: cfg.clone(),
        };
        let reference = init_video_model_shapes(cfg);
        for (name, shape) in reference {
            let got = model.params.get(&name)?.shape();
            if got != shape.as_slice() {
                return Err(Error::dim(format!("`{name}` has shape {got:?}, want {shape:?}")));
            }
        }
        Ok(model)
    }

    fn ctx<'a>(&self, g: &'a mut Graph, p: &'a Params) -> Ctx<'a> {
        Ctx {
            g,
            p,
            heads: self.config.heads,
        }
    }

    pub(crate) fn clip_index(n: usize, frames: usize) -> Vec<usize> {
        (0..n).map(|i| i / frames).collect()
    }

    /// Reference-network features `[B, 4·base, h/4, w/4]` for each of the two
    /// attention sites, from reference latents `[B, C, h, w]`.
    pub(crate) fn refnet_graph(&self, g: &mut Graph, p: &Params, x: Var) -> Result<[Var; 2]> {
        let mut c = self.ctx(g, p);
        let mut h = c.conv("refnet.conv_in", x, 1)?;
        h = c.res_block("refnet.res0", h, None)?;
        h = c.conv("refnet.down0", h, 2)?;
        h = c.res_block("refnet.res1", h, None)?;
        h = c.conv("refnet.down1", h, 2)?;
        h = c.res_block("refnet.res2", h, None)?;
        let site0 = h;
        h = c.spatial_attention("refnet.attn0", h, None)?;
        let site1 = c.res_block("refnet.res3", h, None)?;
        Ok([site0, site1])
    }

    /// Guidance maps for pose images `[N, 3, S, S]` given per-clip reference
    /// pose images `[B, 3, S, S]`; sample `i` belongs to clip `clip_of[i]`.
    pub(crate) fn guider_graph(
        &self,
        g: &mut Graph,
        p: &Params,
        poses: Var,
        ref_pose: Var,
        clip_of: &[usize],
    ) -> Result<[Var; 3]> {
        let stems = dims(&self.config).stems;
        let mut c = self.ctx(g, p);
        let (mut f, mut r) = (poses, ref_pose);
        for s in 0..stems {
            let name = format!("poseguider.stem{s}");
            f = c.conv(&name, f, 2)?;
            f = c.g.silu(f);
            r = c.conv(&name, r, 2)?;
            r = c.g.silu(r);
        }
        let s = c.g.shape(f).to_vec();
        let tok = to_tokens(c.g, f)?;
        let rtok = to_tokens(c.g, r)?;
        let rtok = c.g.select_outer(rtok, clip_of)?;
        let tok = c.attention("poseguider.xattn", tok, rtok, None, 1)?;
        let f0 = from_tokens(c.g, tok, s[2], s[3])?;
        let f1 = c.conv("poseguider.f1", f0, 2)?;
        let f1 = c.g.silu(f1);
        let f2 = c.conv("poseguider.f2", f1, 2)?;
        let f2 = c.g.silu(f2);
        Ok([
            c.conv("poseguider.proj0", f0, 1)?,
            c.conv("poseguider.proj1", f1, 1)?,
            c.conv("poseguider.proj2", f2, 1)?,
        ])
    }

    pub(crate) fn backbone_graph(&self, g: &mut Graph, p: &Params, inp: BackboneInputs<'_>) -> Result<Var> {
        let n = g.shape(inp.x)[0];
        if inp.t.len() != n || inp.frames == 0 || n % inp.frames != 0 {
            return Err(Error::dim(format!(
                "{n} latents with {} timesteps do not form clips of {} frames",
                inp.t.len(),
                inp.frames
            )));
        }
        let base = self.config.base_channels;
        let clip_of = Self::clip_index(n, inp.frames);
        let emb: Vec<f64> = inp.t.iter().flat_map(|&t| sinusoid_embedding(t as f64, base)).collect();
        let reference = match inp.reference {
            Some([a, b]) => Some([g.select_outer(a, &clip_of)?, g.select_outer(b, &clip_of)?]),
            None => None,
        };
        let emb = g.constant(Tensor::new(&[n, base], emb)?);
        let mut c = self.ctx(g, p);
        let temb = c.linear("backbone.time.fc1", emb)?;
        let temb = c.g.silu(temb);
        let temb = c.linear("backbone.time.fc2", temb)?;
        let temb = Some(c.g.silu(temb));

        let motion = |c: &mut Ctx, i: usize, h: Var| -> Result<Var> {
            if inp.motion {
                c.motion(&format!("motion.m{i}"), h, inp.frames)
            } else {
                Ok(h)
            }
        };
        let guide = |c: &mut Ctx, s: usize, h: Var| -> Result<Var> {
            match inp.guidance {
                Some(gm) => c.g.add(h, gm[s]),
                None => Ok(h),
            }
        };

        let mut h = c.conv("backbone.conv_in", inp.x, 1)?;
        h = guide(&mut c, 0, h)?;
        h = c.res_block("backbone.res0", h, temb)?;
        h = motion(&mut c, 0, h)?;
        let skip0 = h;
        h = c.conv("backbone.down0", h, 2)?;
        h = guide(&mut c, 1, h)?;
        h = c.res_block("backbone.res1", h, temb)?;
        h = motion(&mut c, 1, h)?;
        let skip1 = h;
        h = c.conv("backbone.down1", h, 2)?;
        h = guide(&mut c, 2, h)?;
        h = c.res_block("backbone.res2", h, temb)?;
        h = c.spatial_attention("backbone.attn0", h, reference.map(|r| r[0]))?;
        h = motion(&mut c, 2, h)?;
        h = c.res_block("backbone.res3", h, temb)?;
        h = c.spatial_attention("backbone.attn1", h, reference.map(|r| r[1]))?;
        h = motion(&mut c, 3, h)?;
        h = c.g.upsample2x(h)?;
        h = c.conv("backbone.up1", h, 1)?;
        h = c.g.add(h, skip1)?;
        h = c.res_block("backbone.res4", h, temb)?;
        h = motion(&mut c, 4, h)?;
        h = c.g.upsample2x(h)?;
        h = c.conv("backbone.up0", h, 1)?;
        h = c.g.add(h, skip0)?;
        h = c.res_block("backbone.res5", h, temb)?;
        h = motion(&mut c, 5, h)?;
        let h = c.g.silu(h);
        c.conv("backbone.conv_out", h, 1)
    }

    /// `Σ weights ⊙ denoise(x)` through the full conditioned model, with the
    /// gradient of every parameter read. Used for finite-difference checks.
    pub fn probe_objective(&self, params: &Params, inp: &ProbeInputs, weights: &Tensor) -> Result<(f64, Grads)> {
        let n = inp.x.shape().first().copied().unwrap_or(0);
        if inp.frames == 0 || n % inp.frames != 0 || inp.t.len() != n {
            return Err(Error::dim(format!(
                "{n} samples, {} timesteps, {} frames per clip",
                inp.t.len(),
                inp.frames
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(inp.x.clone());
        let rl = g.constant(inp.ref_latent.clone());
        let pv = g.constant(inp.poses.clone());
        let rp = g.constant(inp.ref_pose.clone());
        let reference = self.refnet_graph(&mut g, params, rl)?;
        let clip_of = Self::clip_index(n, inp.frames);
        let guidance = self.guider_graph(&mut g, params, pv, rp, &clip_of)?;
        let out = self.backbone_graph(
            &mut g,
            params,
            BackboneInputs {
                x,
                t: &inp.t,
                frames: inp.frames,
                reference: Some(reference),
                guidance: Some(guidance),
                motion: inp.motion,
            },
        )?;
        let s = g.weighted_sum(out, weights)?;
        Ok((g.value(s).data()[0], g.backward(s)?.into_param_grads(params)))
    }

    fn check_latents(&self, x: &Tensor) -> Result<()> {
        let (ch, sz) = (self.config.latent_channels(), self.config.latent_size());
        let s = x.shape();
        if s.len() != 4 || s[1] != ch || s[2] != sz || s[3] != sz {
            return Err(Error::dim(format!(
                "latents {s:?} do not match the configured [*, {ch}, {sz}, {sz}]"
            )));
        }
        Ok(())
    }

    fn check_pose_images(&self, x: &Tensor) -> Result<()> {
        let sz = self.config.image_size;
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != sz || s[3] != sz {
            return Err(Error::dim(format!(
                "pose images {s:?} do not match the configured [*, 3, {sz}, {sz}]"
            )));
        }
        Ok(())
    }

    /// Reference features for a reference latent `[C, h, w]`, one map per
    /// backbone spatial-attention site. No timestep is involved, so the result
    /// can be reused for every frame and denoising step.
    pub fn reference_features(&self, ref_latent: &Tensor) -> Result<Vec<Tensor>> {
        let x = batch_of_one(ref_latent)?;
        self.check_latents(&x)?;
        let mut g = Graph::inference();
        let x = g.constant(x);
        let maps = self.refnet_graph(&mut g, &self.params, x)?;
        Ok(maps.iter().map(|&m| g.value(m).clone()).collect())
    }

    /// Guidance maps `[F, C_s, h_s, w_s]` for the three down-path scales, from
    /// pose images `[F, 3, S, S]` and the reference pose image `[3, S, S]`.
    pub fn pose_guidance(&self, poses: &Tensor, ref_pose: &Tensor) -> Result<Vec<Tensor>> {
        self.check_pose_images(poses)?;
        let r = batch_of_one(ref_pose)?;
        self.check_pose_images(&r)?;
        let mut g = Graph::inference();
        let n = poses.shape()[0];
        let pv = g.constant(poses.clone());
        let rv = g.constant(r);
        let maps = self.guider_graph(&mut g, &self.params, pv, rv, &vec![0; n])?;
        Ok(maps.iter().map(|&m| g.value(m).clone()).collect())
    }

    /// Predicted noise for the frames `[F, C, h, w]` of one clip at timestep `t`.
    pub fn denoise(&self, x: &Tensor, t: usize, cond: &Conditioning, opts: DenoiseOptions) -> Result<Tensor> {
        self.check_latents(x)?;
        if t >= self.config.t_steps {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 0..{}",
                self.config.t_steps
            )));
        }
        let n = x.shape()[0];
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let reference = match &cond.reference {
            Some(maps) => {
                if maps.len() != 2 {
                    return Err(Error::dim(format!("expected 2 reference maps, got {}", maps.len())));
                }
                Some([g.constant(maps[0].clone()), g.constant(maps[1].clone())])
            }
            None => None,
        };
        let guidance = match &cond.guidance {
            Some(maps) => {
                if maps.len() != 3 {
                    return Err(Error::dim(format!("expected 3 guidance maps, got {}", maps.len())));
                }
                Some([
                    g.constant(maps[0].clone()),
                    g.constant(maps[1].clone()),
                    g.constant(maps[2].clone()),
                ])
            }
            None => None,
        };
        let out = self.backbone_graph(
            &mut g,
            &self.params,
            BackboneInputs {
                x: xv,
                t: &vec![t; n],
                frames: n,
                reference,
                guidance,
                motion: opts.motion,
            },
        )?;
        Ok(g.value(out).clone())
    }
}

fn batch_of_one(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape)
}

/// Expected name → shape table for a configuration.
fn init_video_model_shapes(cfg: &Lmk2VideoConfig) -> Vec<(String, Vec<usize>)> {
    let d = dims(cfg);
    let mut out = Vec::new();
    let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
        out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
        out.push((format!("{name}.bias"), vec![cout]));
    };
    conv("backbone.conv_in".into(), d.latent, d.ch[0], 3);
    conv("refnet.conv_in".into(), d.latent, d.ch[0], 3);
    for (i, &lvl) in RES_LEVELS.iter().enumerate() {
        let c = d.ch[lvl];
        for part in ["conv1", "conv2"] {
            conv(format!("backbone.res{i}.{part}"), c, c, 3);
            if i < REF_BLOCKS {
                conv(format!("refnet.res{i}.{part}"), c, c, 3);
            }
        }
    }
    for net in ["backbone", "refnet"] {
        conv(format!("{net}.down0"), d.ch[0], d.ch[1], 3);
        conv(format!("{net}.down1"), d.ch[1], d.ch[2], 3);
    }
    conv("backbone.up1".into(), d.ch[2], d.ch[1], 3);
    conv("backbone.up0".into(), d.ch[1], d.ch[0], 3);
    conv("backbone.conv_out".into(), d.ch[0], d.latent, 3);
    let mut cin = 3;
    for s in 0..d.stems {
        conv(format!("poseguider.stem{s}"), cin, d.guide[0], 3);
        cin = d.guide[0];
    }
    conv("poseguider.f1".into(), d.guide[0], d.guide[1], 3);
    conv("poseguider.f2".into(), d.guide[1], d.guide[2], 3);
    for s in 0..3 {
        conv(format!("poseguider.proj{s}"), d.guide[s], d.ch[s], 1);
    }
    let mut linear = |name: String, din: usize, dout: usize| {
        out.push((format!("{name}.weight"), vec![din, dout]));
        out.push((format!("{name}.bias"), vec![dout]));
    };
    linear("backbone.time.fc1".into(), cfg.base_channels, d.temb);
    linear("backbone.time.fc2".into(), d.temb, d.temb);
    for (i, &lvl) in RES_LEVELS.iter().enumerate() {
        linear(format!("backbone.res{i}.temb"), d.temb, d.ch[lvl]);
        for p in ["q", "k", "v", "o"] {
            linear(format!("motion.m{i}.{p}"), d.ch[lvl], d.ch[lvl]);
        }
    }
    for site in ["backbone.attn0", "backbone.attn1", "refnet.attn0"] {
        for p in ["q", "k", "v", "o"] {
            linear(format!("{site}.{p}"), d.ch[2], d.ch[2]);
        }
    }
    for p in ["q", "k", "v", "o"] {
        linear(format!("poseguider.xattn.{p}"), d.guide[0], d.guide[0]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::{gradcheck, Grads};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Lmk2VideoConfig {
        Lmk2VideoConfig {
            image_size: 8,
            latent_factor: 2,
            frames_per_clip: 3,
            t_steps: 30,
            ddim_steps: 3,
            base_channels: 4,
            heads: 2,
            guider_channels: 2,
            ..Lmk2VideoConfig::default()
        }
    }

    fn inputs(cfg: &Lmk2VideoConfig, frames: usize, seed: u64) -> (Tensor, Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, s, i) = (cfg.latent_channels(), cfg.latent_size(), cfg.image_size);
        (
            Tensor::randn(&[frames, c, s, s], &mut rng),
            Tensor::uniform(&[c, s, s], 1.0, &mut rng),
            Tensor::uniform(&[frames, 3, i, i], 1.0, &mut rng).map(f64::abs),
            Tensor::uniform(&[3, i, i], 1.0, &mut rng).map(f64::abs),
        )
    }

    /// Overwrites every zero-initialised projection with random values.
    fn wake(model: &mut VideoModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = model
            .params
            .names()
            .filter(|n| n.starts_with("poseguider.proj") || (n.starts_with("motion.") && n.contains(".o.")))
            .cloned()
            .collect();
        for n in names {
            let shape = model.params.get(&n).unwrap().shape().to_vec();
            model.params.insert(n, Tensor::uniform(&shape, 0.3, &mut rng));
        }
    }

    #[test]
    fn init_contract() {
        let cfg = tiny();
        let m = init_video_model(&cfg, 1).unwrap();
        assert!(m.params.bit_eq(&init_video_model(&cfg, 1).unwrap().params));
        for (n, t) in m.params.iter() {
            if n.starts_with("poseguider.proj") || (n.starts_with("motion.") && n.contains(".o.")) {
                assert!(t.data().iter().all(|&v| v == 0.0), "{n}");
            }
        }
        assert!(m.params.get("refnet.res2.conv1.weight").unwrap().bit_eq(m.params.get("backbone.res2.conv1.weight").unwrap()));
        let mut bad = m.params.clone();
        bad.insert("backbone.up0.bias", Tensor::zeros(&[3]));
        assert!(VideoModel::from_params(bad, &cfg).is_err());
    }

    #[test]
    fn reference_features_per_site_and_deterministic() {
        let cfg = tiny();
        let m = init_video_model(&cfg, 2).unwrap();
        let (_, r, _, _) = inputs(&cfg, 1, 3);
        let a = m.reference_features(&r).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].shape(), &[1, 16, 1, 1]);
        let b = m.reference_features(&r).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
        assert!(m.reference_features(&Tensor::zeros(&[12, 2, 2])).is_err());
    }

    #[test]
    fn zero_guidance_equals_disabled_pathway() {
        let cfg = tiny();
        let m = init_video_model(&cfg, 3).unwrap();
        let (x, r, p, rp) = inputs(&cfg, 3, 4);
        let guidance = m.pose_guidance(&p, &rp).unwrap();
        assert_eq!(guidance.len(), 3);
        assert!(guidance.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        let reference = Some(m.reference_features(&r).unwrap());
        let with = Conditioning {
            reference: reference.clone(),
            guidance: Some(guidance),
        };
        let without = Conditioning {
            reference,
            guidance: None,
        };
        let opts = DenoiseOptions::default();
        let a = m.denoise(&x, 7, &with, opts).unwrap();
        let b = m.denoise(&x, 7, &without, opts).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn zero_motion_module_is_identity() {
        let cfg = tiny();
        let m = init_video_model(&cfg, 5).unwrap();
        let (x, r, p, rp) = inputs(&cfg, 3, 6);
        let cond = Conditioning {
            reference: Some(m.reference_features(&r).unwrap()),
            guidance: Some(m.pose_guidance(&p, &rp).unwrap()),
        };
        let on = m.denoise(&x, 11, &cond, DenoiseOptions { motion: true }).unwrap();
        let off = m.denoise(&x, 11, &cond, DenoiseOptions { motion: false }).unwrap();
        assert!(on.bit_eq(&off));
        let mut woke = m.clone();
        wake(&mut woke, 1);
        let on = woke.denoise(&x, 11, &cond, DenoiseOptions { motion: true }).unwrap();
        let off = woke.denoise(&x, 11, &cond, DenoiseOptions { motion: false }).unwrap();
        assert!(!on.bit_eq(&off));
    }

    fn permute_frames(t: &Tensor, perm: &[usize]) -> Tensor {
        let parts: Vec<Tensor> = perm.iter().map(|&i| t.slice_outer(i, i + 1)).collect();
        Tensor::cat_outer(&parts).unwrap()
    }

    #[test]
    fn frames_are_independent_without_motion() {
        let cfg = tiny();
        let mut m = init_video_model(&cfg, 7).unwrap();
        wake(&mut m, 2);
        let (x, r, p, rp) = inputs(&cfg, 3, 8);
        let perm = [2usize, 0, 1];
        let g = m.pose_guidance(&p, &rp).unwrap();
        let gp = m.pose_guidance(&permute_frames(&p, &perm), &rp).unwrap();
        for (a, b) in g.iter().zip(&gp) {
            assert!(permute_frames(a, &perm).bit_eq(b));
        }
        let reference = Some(m.reference_features(&r).unwrap());
        let opts = DenoiseOptions { motion: false };
        let out = m
            .denoise(&x, 4, &Conditioning { reference: reference.clone(), guidance: Some(g) }, opts)
            .unwrap();
        let outp = m
            .denoise(&permute_frames(&x, &perm), 4, &Conditioning { reference, guidance: Some(gp) }, opts)
            .unwrap();
        assert!(permute_frames(&out, &perm).bit_eq(&outp));
    }

    #[test]
    fn reference_bypass_skips_concatenation() {
        let cfg = tiny();
        let m = init_video_model(&cfg, 9).unwrap();
        let (x, r, _, _) = inputs(&cfg, 2, 10);
        let opts = DenoiseOptions::default();
        let bypass = m.denoise(&x, 3, &Conditioning::default(), opts).unwrap();
        assert!(bypass.bit_eq(&m.denoise(&x, 3, &Conditioning::default(), opts).unwrap()));
        // Appending all-zero keys and values still changes the softmax, so a
        // zeroed reference is not the same as bypassing it.
        let zeros: Vec<Tensor> = m
            .reference_features(&r)
            .unwrap()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let zeroed = m
            .denoise(&x, 3, &Conditioning { reference: Some(zeros), guidance: None }, opts)
            .unwrap();
        assert!(!zeroed.bit_eq(&bypass));
        let real = m
            .denoise(&x, 3, &Conditioning { reference: Some(m.reference_features(&r).unwrap()), guidance: None }, opts)
            .unwrap();
        assert!(!real.bit_eq(&bypass));
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let cfg = tiny();
        let mut m = init_video_model(&cfg, 11).unwrap();
        wake(&mut m, 3);
        let (x, r, p, rp) = inputs(&cfg, 2, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let probe = Tensor::randn(x.shape(), &mut rng);
        let r = r.reshape(&[1, 12, 4, 4]).unwrap();
        let rp = rp.reshape(&[1, 3, 8, 8]).unwrap();
        let f = |params: &Params| -> Result<(f64, Grads)> {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let rv = g.constant(r.clone());
            let pv = g.constant(p.clone());
            let rpv = g.constant(rp.clone());
            let reference = m.refnet_graph(&mut g, params, rv)?;
            let guidance = m.guider_graph(&mut g, params, pv, rpv, &[0, 0])?;
            let out = m.backbone_graph(
                &mut g,
                params,
                BackboneInputs {
                    x: xv,
                    t: &[5, 5],
                    frames: 2,
                    reference: Some(reference),
                    guidance: Some(guidance),
                    motion: true,
                },
            )?;
            let s = g.weighted_sum(out, &probe)?;
            Ok((g.value(s).data()[0], g.backward(s)?.into_param_grads(params)))
        };
        let report = gradcheck(f, &m.params, 1e-6, Some(6)).unwrap();
        assert!(report.checked > 500, "{}", report.checked);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
