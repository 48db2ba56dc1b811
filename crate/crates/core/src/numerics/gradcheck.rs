use super::{Bindings, NumericsError, ParamStore, Tape, Tensor, Var};

/// `|analytic − numeric| / max(1e-12, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-12)
}

/// Central differences of a scalar record with respect to every entry of one parameter.
pub fn central_difference<F>(
    params: &ParamStore,
    name: &str,
    h: f64,
    f: &F,
) -> Result<Tensor, NumericsError>
where
    F: Fn(&mut Tape, &Bindings) -> Var,
{
    let base = params
        .get(name)
        .ok_or_else(|| NumericsError::Contract(format!("unknown parameter `{name}`")))?;
    let eval = |p: &ParamStore| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let b = tape.bind(p);
        let out = f(&mut tape, &b);
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(NumericsError::Contract("record output is not scalar".into()));
        }
        Ok(v.item())
    };
    let mut probe = params.clone();
    let mut out = vec![0.0; base.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        let x = base.data()[i];
        probe.get_mut(name).expect("present").data_mut()[i] = x + h;
        let up = eval(&probe)?;
        probe.get_mut(name).expect("present").data_mut()[i] = x - h;
        let down = eval(&probe)?;
        probe.get_mut(name).expect("present").data_mut()[i] = x;
        *slot = (up - down) / (2.0 * h);
    }
    Ok(Tensor::new(base.shape().to_vec(), out))
}

/// Max relative error between the reverse-mode gradient of `f` with respect to
/// parameter `name` and its central-difference estimate.
pub fn finite_difference_check<F>(
    params: &ParamStore,
    name: &str,
    h: f64,
    f: F,
) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &Bindings) -> Var,
{
    if !(h > 0.0) {
        return Err(NumericsError::Contract(format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let b = tape.bind(params);
    let out = f(&mut tape, &b);
    let analytic = tape.backward(out)?.wrt(b.get(name));
    let numeric = central_difference(params, name, h, &f)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(3.0));
        let err = finite_difference_check(&p, "x", 1e-5, |t, b| {
            let x = b.get("x");
            let y = t.mul(x, x);
            t.sum(y)
        })
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(3.0));
        assert!(finite_difference_check(&p, "x", 0.0, |t, b| t.sum(b.get("x"))).is_err());
    }
}
