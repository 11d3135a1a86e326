use super::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest `|analytic - central difference| / max(1, |analytic|)` over the
/// coordinates of `x`, for a scalar-valued `f`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let mut tape = Tape::detached();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::detached();
        let v = tape.leaf(probe, false);
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Same measure as [`grad_check`] over parameters of a set. `coords` picks
/// which `(parameter index, element index)` pairs to probe; `None` probes all.
pub fn grad_check_params<F>(
    f: F,
    params: &ParamSet,
    h: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        tape.backward(loss)?.into_param_grads(params.len())
    };
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = params
                .iter()
                .flat_map(|(id, _, t)| (0..t.numel()).map(move |j| (id.index(), j)))
                .collect();
            &all
        }
    };
    let ids: Vec<_> = params.ids().collect();
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new(p);
        let out = f(&mut tape)?;
        tape.value(out).item()
    };
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for &(pi, j) in coords {
        let id = *ids
            .get(pi)
            .ok_or_else(|| Error::contract(format!("grad_check_params: no parameter {pi}")))?;
        let orig = params.get(id).data()[j];
        probe.get_mut(id).data_mut()[j] = orig + h;
        let up = eval(&probe)?;
        probe.get_mut(id).data_mut()[j] = orig - h;
        let down = eval(&probe)?;
        probe.get_mut(id).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[pi].as_ref().map_or(0.0, |g| g.data()[j]);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
