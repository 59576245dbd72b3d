use super::{Graph, NodeId, Result, Tensor};

/// Denominator floor for [`relative_error`]. Gradients smaller than this are
/// compared in absolute terms; central differences cannot resolve relative
/// error on values that close to zero.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// (parameter index, element index) of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `step`, element by element over every tensor in `params`.
///
/// `f` receives a fresh graph and one leaf per parameter and must return a
/// scalar node. It has to be a pure function of the parameter values.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &leaves)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let leaves: Vec<NodeId> = params.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &leaves)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&l| grads.wrt(l)).collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.len() {
            let orig = p.data()[ei];
            work[pi].data_mut()[ei] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data()[ei];
            let rel = relative_error(a, numeric);
            report.max_absolute_error = report.max_absolute_error.max((a - numeric).abs());
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((pi, ei));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_function_has_zero_error() {
        let w = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let r = grad_check(|g, p| g.scale(p[0], 0.0).and_then(|s| g.sum(s)), &[w], 1e-5).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn quadratic_at_three() {
        let w = Tensor::scalar(3.0);
        let f = |g: &mut Graph, p: &[NodeId]| {
            let sq = g.matmul(p[0], p[0])?;
            g.sum(sq)
        };
        let mut g = Graph::new();
        let leaf = g.leaf(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let out = f(&mut g, &[leaf]).unwrap();
        assert_eq!(g.backward(out).unwrap().wrt(leaf).item(), 6.0);
        let r = grad_check(f, &[Tensor::new(vec![1, 1], w.into_data()).unwrap()], 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-9);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let c = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let table = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let f = |g: &mut Graph, p: &[NodeId]| {
            let emb = g.gather(p[3], &[1, 5, 1, 0, 2])?;
            let x = g.add(p[0], emb)?;
            let n = g.layer_norm(x, 1e-5)?;
            let h = g.gelu(n)?;
            let q = g.matmul(h, p[2])?;
            let att = g.attention(q, h, x, 2, &[2, 3])?;
            let cat = g.concat_cols(att, q)?;
            let half = g.scale(cat, 0.5)?;
            let sm = g.softmax(half)?;
            let proj = g.matmul_t(sm, p[1])?;
            g.cross_entropy(proj, &[0, 2, 1, 1, 0], Some(&[1.0, 0.0, 1.0, 1.0, 1.0]))
        };
        let r = grad_check(f, &[a, b, c, table], 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }
}
