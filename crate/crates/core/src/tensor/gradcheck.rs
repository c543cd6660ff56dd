use super::{ParamId, ParamStore, Rng, Stream, Tape, TensorError, Var};

const ROUNDOFF_ULPS: f64 = 8.0;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Number of parameter coordinates to probe; all of them if larger than
    /// the parameter count.
    pub samples: usize,
    /// Denominator floor, so that gradients that are zero up to roundoff do
    /// not produce huge relative errors.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            samples: 200,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: Vec<CoordCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checked
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn eval<E, F>(params: &ParamStore, f: &mut F) -> Result<f64, E>
where
    E: From<TensorError>,
    F: FnMut(&mut Tape<'_>) -> Result<Var, E>,
{
    let mut tape = Tape::new(params);
    let out = f(&mut tape)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(TensorError::NotScalar(v.shape().to_vec()).into());
    }
    Ok(v.data()[0])
}

/// Compares the tape's gradient of the scalar computed by `f` against
/// central differences on a random sample of parameter coordinates.
/// `params` is perturbed in place and restored before returning.
pub fn grad_check<E, F>(params: &mut ParamStore, cfg: &GradCheckConfig, mut f: F) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: FnMut(&mut Tape<'_>) -> Result<Var, E>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let out = f(&mut tape)?;
        let base = tape.value(out).data().first().copied().unwrap_or(f64::NAN);
        if !base.is_finite() {
            return Err(TensorError::NonFinite("loss at the unperturbed point".into()).into());
        }
        tape.backward(out)?.into_params()
    };

    let coords: Vec<(ParamId, usize)> = params
        .iter()
        .flat_map(|(id, _, t)| (0..t.len()).map(move |i| (id, i)))
        .collect();
    let picked: Vec<(ParamId, usize)> = if cfg.samples >= coords.len() {
        coords
    } else {
        let mut rng = Rng::new(cfg.seed, Stream::GradCheck);
        let mut idx = rng.sample_indices(coords.len(), cfg.samples);
        idx.sort_unstable();
        idx.into_iter().map(|k| coords[k]).collect()
    };

    let mut checked = Vec::with_capacity(picked.len());
    let mut max_rel = 0.0f64;
    for (id, i) in picked {
        let name = params.name(id).to_string();
        let a = analytic.get(id)[i];
        if !a.is_finite() {
            return Err(TensorError::NonFinite(format!("analytic gradient of {name}[{i}]")).into());
        }
        let orig = params.get(id).data()[i];
        params.get_mut(id).data_mut()[i] = orig + cfg.h;
        let plus = eval(params, &mut f);
        params.get_mut(id).data_mut()[i] = orig - cfg.h;
        let minus = eval(params, &mut f);
        params.get_mut(id).data_mut()[i] = orig;
        let (plus, minus) = (plus?, minus?);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NonFinite(format!("loss with {name}[{i}] perturbed")).into());
        }
        let n = (plus - minus) / (2.0 * cfg.h);
        // A few ulps of the loss, divided by 2h, is noise in the difference
        // quotient; only the excess counts against the analytic value.
        let noise = ROUNDOFF_ULPS * f64::EPSILON * plus.abs().max(minus.abs()) / (2.0 * cfg.h);
        let rel = ((a - n).abs() - noise).max(0.0) / a.abs().max(n.abs()).max(cfg.abs_floor);
        max_rel = max_rel.max(rel);
        checked.push(CoordCheck {
            param: name,
            index: i,
            analytic: a,
            numeric: n,
            rel_error: rel,
        });
    }
    Ok(GradCheckReport {
        checked,
        max_rel_error: max_rel,
        tol: cfg.tol,
    })
}
