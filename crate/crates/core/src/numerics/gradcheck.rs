use super::{Gradients, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    /// `max |analytic - numeric|` over the tensor.
    pub max_abs_error: f64,
    /// `max_abs_error` divided by the largest gradient magnitude seen in
    /// either estimate; zero when both estimates vanish.
    pub max_rel_error: f64,
    pub analytic_scale: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub eps: f32,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |p| p.max_rel_error)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

/// Compares `analytic` against central differences of `loss`, perturbing
/// every element of every parameter in `store` by `±eps`.
///
/// The numeric quotient divides by the perturbation actually realised in
/// `f32`, so rounding of `w ± eps` does not bias the estimate.
pub fn finite_diff_check<F>(
    mut loss: F,
    store: &ParamStore,
    analytic: &Gradients,
    eps: f32,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let ids: Vec<ParamId> = store.ids().collect();
    finite_diff_check_subset(&mut loss, store, analytic, eps, &ids)
}

/// Same as [`finite_diff_check`] restricted to `ids`.
pub fn finite_diff_check_subset<F>(
    mut loss: F,
    store: &ParamStore,
    analytic: &Gradients,
    eps: f32,
    ids: &[ParamId],
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut work = store.clone();
    let mut params = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.get(id).numel();
        let mut max_abs = 0.0f64;
        let mut scale = 0.0f64;
        let mut analytic_scale = 0.0f64;
        for i in 0..n {
            let w = store.get(id).data()[i];
            let plus = w + eps;
            let minus = w - eps;
            work.get_mut(id).data_mut()[i] = plus;
            let f_plus = loss(&work);
            work.get_mut(id).data_mut()[i] = minus;
            let f_minus = loss(&work);
            work.get_mut(id).data_mut()[i] = w;
            let numeric = (f_plus - f_minus) / (plus as f64 - minus as f64);
            let a = analytic.get(id).data()[i] as f64;
            max_abs = max_abs.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            analytic_scale = analytic_scale.max(a.abs());
        }
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            numel: n,
            max_abs_error: max_abs,
            max_rel_error: if scale > 0.0 { max_abs / scale } else { 0.0 },
            analytic_scale,
        });
    }
    GradCheckReport { eps, params }
}
