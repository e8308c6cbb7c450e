use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scalar reduction applied to the graph output before differentiating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CheckLoss {
    #[default]
    SumSquares,
    /// The output is already a one-element loss.
    Identity,
}

/// Worst relative error found for one leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafCheck {
    pub leaf: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub checked: usize,
}

fn eval(
    build: &impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    leaves: &[Tensor],
    loss: CheckLoss,
) -> Result<(Graph, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let l = match loss {
        CheckLoss::SumSquares => g.sum_squares(out)?,
        CheckLoss::Identity => {
            if g.value(out).len() != 1 {
                return Err(Error::InvalidArgument(
                    "identity loss needs a one-element output".into(),
                ));
            }
            g.reshape(out, &[1])?
        }
    };
    Ok((g, vars, l))
}

/// Compares analytic gradients with central differences
/// `(L(θ+ε) − L(θ−ε)) / 2ε` for every leaf.
///
/// Relative error is `|a − n| / max(1, |a|, |n|)`. When `max_coords` is set,
/// at most that many evenly strided coordinates are probed per leaf.
pub fn finite_diff_check(
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    leaves: &[Tensor],
    loss: CheckLoss,
    eps: f64,
    max_coords: Option<usize>,
) -> Result<Vec<LeafCheck>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let (g, vars, l) = eval(&build, leaves, loss)?;
    let grads = g.backward(l, &Tensor::scalar(1.0))?;
    let mut report = Vec::with_capacity(leaves.len());
    let mut probe = leaves.to_vec();
    for (li, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        let n = leaves[li].len();
        let step = max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
        let mut check = LeafCheck {
            leaf: li,
            max_rel_err: 0.0,
            worst_coord: 0,
            checked: 0,
        };
        for k in (0..n).step_by(step) {
            let orig = leaves[li].data()[k];
            probe[li].data_mut()[k] = orig + eps;
            let (gp, _, lp) = eval(&build, &probe, loss)?;
            probe[li].data_mut()[k] = orig - eps;
            let (gm, _, lm) = eval(&build, &probe, loss)?;
            probe[li].data_mut()[k] = orig;
            let num = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * eps);
            let a = analytic.data()[k];
            let rel = (a - num).abs() / 1f64.max(a.abs()).max(num.abs());
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_coord = k;
            }
            check.checked += 1;
        }
        report.push(check);
    }
    Ok(report)
}
