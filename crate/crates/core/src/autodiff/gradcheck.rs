use super::{Graph, ParamStore, ShapeError, Var};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged by absolute error instead.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compare analytic gradients of the scalar built by `f` against central
/// differences `(f(p+eps) - f(p-eps)) / 2eps`, over every coordinate of
/// every parameter in `params`.
pub fn grad_check<F>(params: &ParamStore, f: F, eps: f64) -> Result<GradCheckReport, ShapeError>
where
    F: Fn(&mut Graph) -> Result<Var, ShapeError>,
{
    assert!(eps > 0.0, "eps must be positive");
    let grads = {
        let mut g = Graph::new(params);
        let out = f(&mut g)?;
        g.backward(out)
    };
    let eval = |store: &ParamStore| -> Result<f64, ShapeError> {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        Ok(g.scalar(out))
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for id in params.ids() {
        let shape = params.get(id).shape.clone();
        let analytic = grads.to_dense(id, &shape);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work.get(id).data[i];
            work.get_mut(id).data[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).data[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).data[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), i));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
