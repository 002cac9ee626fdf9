use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub parameter_count: usize,
    /// Parameter name and flat element index of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences, element by element, for every listed variable.
///
/// Variables must be `f64`. `f` is re-evaluated twice per element, so keep
/// shapes tiny. The relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn check_gradients<F>(f: F, params: &[(String, Var)], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    for (name, var) in params {
        if var.dtype() != DType::F64 {
            return Err(Error::Config(format!(
                "gradient check needs f64 parameters, `{name}` is {:?}",
                var.dtype()
            )));
        }
    }
    let scalar = |t: &Tensor| -> Result<f64> {
        if t.elem_count() != 1 {
            return Err(Error::Shape(format!(
                "gradient check needs a scalar output, got shape {:?}",
                t.dims()
            )));
        }
        Ok(t.flatten_all()?.to_vec1::<f64>()?[0])
    };

    let out = f()?;
    scalar(&out)?;
    let grads = out.backward()?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        parameter_count: 0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (name, var) in params {
        let shape = var.shape().clone();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; shape.elem_count()],
        };
        let original = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let mut probe = original.clone();
        for i in 0..original.len() {
            probe[i] = original[i] + epsilon;
            var.set(&Tensor::from_vec(probe.clone(), &shape, var.device())?)?;
            let plus = scalar(&f()?)?;
            probe[i] = original[i] - epsilon;
            var.set(&Tensor::from_vec(probe.clone(), &shape, var.device())?)?;
            let minus = scalar(&f()?)?;
            probe[i] = original[i];

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((name.clone(), i));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
        var.set(&Tensor::from_vec(original, &shape, var.device())?)?;
        report.parameter_count += shape.elem_count();
    }
    Ok(report)
}
