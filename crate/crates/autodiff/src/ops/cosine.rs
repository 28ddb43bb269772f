use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Default norm floor for cosine similarity.
pub const COSINE_EPS: f32 = 1e-8;

/// `a.b / (max(|a|, eps) * max(|b|, eps))` and its partials.
struct CosineParts {
    cos: f64,
    na: f64,
    nb: f64,
    a_clamped: bool,
    b_clamped: bool,
}

fn cosine_parts(a: impl Iterator<Item = f64> + Clone, b: impl Iterator<Item = f64> + Clone, eps: f64) -> CosineParts {
    let dot: f64 = a.clone().zip(b.clone()).map(|(x, y)| x * y).sum();
    let ra = a.map(|x| x * x).sum::<f64>().sqrt();
    let rb = b.map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (ra.max(eps), rb.max(eps));
    CosineParts { cos: dot / (na * nb), na, nb, a_clamped: ra <= eps, b_clamped: rb <= eps }
}

impl CosineParts {
    /// d cos / d a_i given a_i and b_i.
    fn d_first(&self, ai: f64, bi: f64) -> f64 {
        let mut d = bi / (self.na * self.nb);
        if !self.a_clamped {
            d -= self.cos * ai / (self.na * self.na);
        }
        d
    }

    fn d_second(&self, ai: f64, bi: f64) -> f64 {
        let mut d = ai / (self.na * self.nb);
        if !self.b_clamped {
            d -= self.cos * bi / (self.nb * self.nb);
        }
        d
    }
}

/// Cosine similarity of two vectors of equal length.
pub fn cosine_similarity(a: &Tensor, b: &Tensor, eps: f32) -> Result<Tensor> {
    const OP: &str = "cosine_similarity";
    if a.shape().len() != 1 {
        return Err(AutodiffError::Rank { op: OP, expected: 1, shape: a.shape().to_vec() });
    }
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch { op: OP, what: "vector length".into(), expected: a.len(), got: b.len() });
    }
    if a.is_empty() {
        return Err(AutodiffError::InvalidArgument { op: OP, msg: "vectors must be non-empty".into() });
    }
    let (av, bv) = (a.to_vec(), b.to_vec());
    let parts = cosine_parts(av.iter().map(|&x| x as f64), bv.iter().map(|&x| x as f64), eps as f64);
    let value = parts.cos as f32;
    Ok(Tensor::from_op(OP, vec![value], vec![], vec![a.clone(), b.clone()], move |g, needs| {
        let g = g[0] as f64;
        vec![
            needs[0].then(|| av.iter().zip(&bv).map(|(&x, &y)| (g * parts.d_first(x as f64, y as f64)) as f32).collect()),
            needs[1].then(|| av.iter().zip(&bv).map(|(&x, &y)| (g * parts.d_second(x as f64, y as f64)) as f32).collect()),
        ]
    }))
}

/// Output of [`group_max_cosine`].
#[derive(Debug, Clone)]
pub struct GroupMaxCosine {
    /// Best cosine per group, `[B, G, h, w]`.
    pub scores: Tensor,
    /// Global index of the best prototype over all groups, per cell `[B, h, w]`.
    /// Ties resolve to the lowest index.
    pub winners: Vec<usize>,
    /// Global index of the best prototype within each group, `[B, G, h, w]`.
    pub group_winners: Vec<usize>,
}

/// For every cell feature of `features` (`[B, d, h, w]`) and every group of
/// `per_group` consecutive prototype columns of `bank` (`[d, groups*per_group]`),
/// the maximum cosine similarity in that group.
///
/// The gradient of each group score flows only through its maximizing
/// prototype (ties: lowest index).
pub fn group_max_cosine(features: &Tensor, bank: &Tensor, groups: usize, per_group: usize, eps: f32) -> Result<GroupMaxCosine> {
    const OP: &str = "group_max_cosine";
    let [batch, d, h, w] = match *features.shape() {
        [a, b, c, e] => [a, b, c, e],
        _ => return Err(AutodiffError::Rank { op: OP, expected: 4, shape: features.shape().to_vec() }),
    };
    let np = groups * per_group;
    if groups == 0 || per_group == 0 {
        return Err(AutodiffError::InvalidArgument { op: OP, msg: "need at least one group and one prototype per group".into() });
    }
    if bank.shape() != [d, np] {
        let (exp, got) = if bank.shape().first() != Some(&d) {
            (d, bank.shape().first().copied().unwrap_or(0))
        } else {
            (np, bank.shape().get(1).copied().unwrap_or(0))
        };
        return Err(AutodiffError::ShapeMismatch { op: OP, what: "prototype bank shape [d, G*Q]".into(), expected: exp, got });
    }
    let hw = h * w;
    let f = features.to_vec();
    let p = bank.to_vec();
    let eps = eps as f64;

    let mut scores = vec![0.0f32; batch * groups * hw];
    let mut winners = vec![0usize; batch * hw];
    let mut group_winners = vec![0usize; batch * groups * hw];
    let mut fv = vec![0.0f64; d];
    let mut pv = vec![0.0f64; d];
    for b in 0..batch {
        for cell in 0..hw {
            for (i, v) in fv.iter_mut().enumerate() {
                *v = f[(b * d + i) * hw + cell] as f64;
            }
            // Compared in f32 so the winner agrees with an argmax over `scores`.
            let mut global = (f32::NEG_INFINITY, 0usize);
            for g in 0..groups {
                let mut best = (f64::NEG_INFINITY, 0usize);
                for q in 0..per_group {
                    let j = g * per_group + q;
                    for (i, v) in pv.iter_mut().enumerate() {
                        *v = p[i * np + j] as f64;
                    }
                    let c = cosine_parts(fv.iter().copied(), pv.iter().copied(), eps).cos;
                    if c > best.0 || q == 0 {
                        best = (c, j);
                    }
                }
                let o = (b * groups + g) * hw + cell;
                scores[o] = best.0 as f32;
                group_winners[o] = best.1;
                if (best.0 as f32) > global.0 || g == 0 {
                    global = (best.0 as f32, best.1);
                }
            }
            winners[b * hw + cell] = global.1;
        }
    }

    let gw = group_winners.clone();
    let shape = vec![batch, groups, h, w];
    let scores = Tensor::from_op(OP, scores, shape, vec![features.clone(), bank.clone()], move |grad, needs| {
        let mut df = needs[0].then(|| vec![0.0f64; f.len()]);
        let mut dp = needs[1].then(|| vec![0.0f64; p.len()]);
        let mut fv = vec![0.0f64; d];
        let mut pv = vec![0.0f64; d];
        for b in 0..batch {
            for cell in 0..hw {
                for (i, v) in fv.iter_mut().enumerate() {
                    *v = f[(b * d + i) * hw + cell] as f64;
                }
                for g in 0..groups {
                    let o = (b * groups + g) * hw + cell;
                    let gv = grad[o] as f64;
                    if gv == 0.0 {
                        continue;
                    }
                    let j = gw[o];
                    for (i, v) in pv.iter_mut().enumerate() {
                        *v = p[i * np + j] as f64;
                    }
                    let parts = cosine_parts(fv.iter().copied(), pv.iter().copied(), eps);
                    if let Some(df) = df.as_mut() {
                        for i in 0..d {
                            df[(b * d + i) * hw + cell] += gv * parts.d_first(fv[i], pv[i]);
                        }
                    }
                    if let Some(dp) = dp.as_mut() {
                        for i in 0..d {
                            dp[i * np + j] += gv * parts.d_second(fv[i], pv[i]);
                        }
                    }
                }
            }
        }
        let cast = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect();
        vec![df.map(cast), dp.map(cast)]
    });
    Ok(GroupMaxCosine { scores, winners, group_winners })
}
