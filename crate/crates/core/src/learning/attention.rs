//! Scaled dot-product attention kernels shared by the graph op and the
//! standalone [`softmax_attention`] function.

use crate::error::{Error, Result};
use crate::learning::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AttentionDims {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    /// Query/key width across all heads.
    pub d: usize,
    /// Value width across all heads.
    pub dv: usize,
    pub heads: usize,
}

impl AttentionDims {
    pub fn infer(
        q: &[usize],
        k: &[usize],
        v: &[usize],
        heads: usize,
        mask_len: Option<usize>,
    ) -> Result<Self> {
        if q.len() != 3 || k.len() != 3 || v.len() != 3 {
            return Err(Error::dim("attention expects [B, T, d] inputs"));
        }
        if q[0] != k[0] || k[0] != v[0] {
            return Err(Error::dim(format!(
                "attention batch mismatch: {q:?} {k:?} {v:?}"
            )));
        }
        if q[2] != k[2] {
            return Err(Error::dim(format!(
                "query width {} differs from key width {}",
                q[2], k[2]
            )));
        }
        if k[1] != v[1] {
            return Err(Error::dim("keys and values must have the same length"));
        }
        if heads == 0 || q[2] % heads != 0 || v[2] % heads != 0 {
            return Err(Error::dim(format!(
                "widths {} / {} not divisible by {heads} heads",
                q[2], v[2]
            )));
        }
        if let Some(len) = mask_len {
            if len != q[1] * k[1] {
                return Err(Error::dim("mask must be Tq×Tk"));
            }
        }
        Ok(Self {
            batch: q[0],
            tq: q[1],
            tk: k[1],
            d: q[2],
            dv: v[2],
            heads,
        })
    }
}

/// Returns the output `[B, Tq, dv]` and the attention probabilities
/// `[B, H, Tq, Tk]` (masked entries exactly zero).
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dims: &AttentionDims,
    mask: Option<&[bool]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let AttentionDims {
        batch,
        tq,
        tk,
        d,
        dv,
        heads,
    } = *dims;
    if let Some(m) = mask {
        if let Some(row) = (0..tq).find(|&i| !m[i * tk..(i + 1) * tk].iter().any(|&x| x)) {
            return Err(Error::DegenerateMask { row });
        }
    }
    if tk == 0 {
        return Err(Error::DegenerateMask { row: 0 });
    }
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; batch * tq * dv];
    let mut probs = vec![0.0; batch * heads * tq * tk];
    let mut scores = vec![0.0; tk];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..tq {
                let qi = &q[(b * tq + i) * d + h * dh..][..dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..tk {
                    if mask.is_some_and(|m| !m[i * tk + j]) {
                        continue;
                    }
                    let kj = &k[(b * tk + j) * d + h * dh..][..dh];
                    let s: f64 = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let p = &mut probs[((b * heads + h) * tq + i) * tk..][..tk];
                let mut total = 0.0;
                for j in 0..tk {
                    if mask.is_some_and(|m| !m[i * tk + j]) {
                        continue;
                    }
                    let e = (scores[j] - max).exp();
                    p[j] = e;
                    total += e;
                }
                for pj in p.iter_mut() {
                    *pj /= total;
                }
                let oi = &mut out[(b * tq + i) * dv + h * dvh..][..dvh];
                for (j, &pj) in p.iter().enumerate() {
                    if pj == 0.0 {
                        continue;
                    }
                    let vj = &v[(b * tk + j) * dv + h * dvh..][..dvh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += pj * x;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

/// Gradients `(dq, dk, dv)` given the forward probabilities and `d out`.
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    dims: &AttentionDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttentionDims {
        batch,
        tq,
        tk,
        d,
        dv,
        heads,
    } = *dims;
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dvv = vec![0.0; v.len()];
    let mut dp = vec![0.0; tk];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..tq {
                let p = &probs[((b * heads + h) * tq + i) * tk..][..tk];
                let doi = &dout[(b * tq + i) * dv + h * dvh..][..dvh];
                let mut dot = 0.0;
                for j in 0..tk {
                    let vj = &v[(b * tk + j) * dv + h * dvh..][..dvh];
                    dp[j] = doi.iter().zip(vj).map(|(a, c)| a * c).sum();
                    dot += p[j] * dp[j];
                    if p[j] != 0.0 {
                        let dvj = &mut dvv[(b * tk + j) * dv + h * dvh..][..dvh];
                        for (g, &o) in dvj.iter_mut().zip(doi) {
                            *g += p[j] * o;
                        }
                    }
                }
                let qi = &q[(b * tq + i) * d + h * dh..][..dh];
                for j in 0..tk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let kj = &k[(b * tk + j) * d + h * dh..][..dh];
                    let dqi = &mut dq[(b * tq + i) * d + h * dh..][..dh];
                    for (g, &x) in dqi.iter_mut().zip(kj) {
                        *g += ds * x;
                    }
                    let dkj = &mut dk[(b * tk + j) * d + h * dh..][..dh];
                    for (g, &x) in dkj.iter_mut().zip(qi) {
                        *g += ds * x;
                    }
                }
            }
        }
    }
    (dq, dk, dvv)
}

/// Single-head attention on matrices: row `i` of the result is
/// `Σ_j softmax_j(Q_i·K_j / √d) · V_j` over the unmasked keys.
///
/// `mask[i][j] == true` means query `i` may attend to key `j`.
pub fn softmax_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&[Vec<bool>]>,
) -> Result<Tensor> {
    if q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 {
        return Err(Error::dim("softmax_attention expects matrices"));
    }
    let flat_mask = match mask {
        Some(rows) => {
            if rows.len() != q.shape()[0] || rows.iter().any(|r| r.len() != k.shape()[0]) {
                return Err(Error::dim("mask must be Tq×Tk"));
            }
            Some(rows.concat())
        }
        None => None,
    };
    let dims = AttentionDims::infer(
        &[1, q.shape()[0], q.shape()[1]],
        &[1, k.shape()[0], k.shape()[1]],
        &[1, v.shape()[0], v.shape()[1]],
        1,
        flat_mask.as_ref().map(Vec::len),
    )?;
    let (out, _) = attention_forward(q.data(), k.data(), v.data(), &dims, flat_mask.as_deref())?;
    Tensor::new(&[dims.tq, dims.dv], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let k = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        let v = Tensor::new(&[1, 2], vec![0.5, -1.5]).unwrap();
        let out = softmax_attention(&q, &k, &v, None).unwrap();
        for i in 0..3 {
            assert_eq!(out.get(&[i, 0]), 0.5);
            assert_eq!(out.get(&[i, 1]), -1.5);
        }
    }

    #[test]
    fn uniform_scores_over_equal_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::zeros(&[2, 3]);
        let k = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let v = Tensor::from_rows(&vec![vec![0.25, 2.0]; 4]).unwrap();
        let out = softmax_attention(&q, &k, &v, None).unwrap();
        for x in out.data().chunks(2) {
            assert!((x[0] - 0.25).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_direct_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let k = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let v = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let out = softmax_attention(&q, &k, &v, None).unwrap();
        for i in 0..2 {
            let scores: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|c| q.get(&[i, c]) * k.get(&[j, c])).sum::<f64>() / 2.0)
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for c in 0..4 {
                let want: f64 = (0..3).map(|j| scores[j].exp() / z * v.get(&[j, c])).sum();
                assert!((out.get(&[i, c]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let q = Tensor::zeros(&[2, 2]);
        let k = Tensor::zeros(&[2, 2]);
        let mask = vec![vec![true, false], vec![false, false]];
        let err = softmax_attention(&q, &k, &k, Some(&mask)).unwrap_err();
        assert!(matches!(err, Error::DegenerateMask { row: 1 }));
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let q = Tensor::zeros(&[2, 3]);
        let k = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            softmax_attention(&q, &k, &k, None),
            Err(Error::Dimension(_))
        ));
    }

    proptest! {
        #[test]
        fn outputs_are_convex_combinations(
            seed in 0u64..1000,
            tq in 1usize..5,
            tk in 1usize..6,
            mask_bits in proptest::collection::vec(any::<bool>(), 30),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Tensor::uniform(&[tq, 3], 3.0, &mut rng);
            let k = Tensor::uniform(&[tk, 3], 3.0, &mut rng);
            let v = Tensor::uniform(&[tk, 2], 5.0, &mut rng);
            let mut mask: Vec<Vec<bool>> = (0..tq)
                .map(|i| (0..tk).map(|j| mask_bits[(i * tk + j) % 30]).collect())
                .collect();
            for (i, row) in mask.iter_mut().enumerate() {
                row[i % tk] = true;
            }
            let out = softmax_attention(&q, &k, &v, Some(&mask)).unwrap();
            for i in 0..tq {
                for c in 0..2 {
                    let allowed = (0..tk).filter(|&j| mask[i][j]).map(|j| v.get(&[j, c]));
                    let (lo, hi) = allowed.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
                    let o = out.get(&[i, c]);
                    prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                }
            }
        }
    }
}
