//! Tuning stage: relax a layer's binary mask into continuous values by a
//! closed-form least-squares fit of the layer's residual output.
//!
//! For one sub-layer with units `c_i(·)`, ungated remainder `r(·)` (the
//! adapter, if any), clean input `x` and masked-model input `x'`, the fitted
//! objective is
//!
//! ```text
//! E(m) = Σ_samples ‖ (x' + Σ_i m_i c_i(x') + r(x')) − (x + Σ_i c_i(x) + r(x)) ‖²
//! ```
//!
//! With `u = m − 1` this becomes `‖A u − b‖²`. Two assemblies are offered,
//! see [`Linearization`].

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::linalg::{cholesky, cholesky_solve, gram, Matrix};
use crate::toynet::{forward, Dataset, HydraAdapter, LayerAdapters, ToyLayer, ToyNetError, ToyNetwork, Trace};
use crate::types::{Component, ContinuousMask, MaskSolution};

#[derive(Debug, Clone, PartialEq)]
pub enum TuneError {
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    NonFiniteSystem,
    Model(ToyNetError),
}

impl fmt::Display for TuneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TuneError::DimensionMismatch { what, expected, found } => {
                write!(f, "dimension mismatch in {what}: expected {expected}, found {found}")
            }
            TuneError::NonFiniteSystem => f.write_str("reconstruction system has non-finite entries"),
            TuneError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for TuneError {}

impl From<ToyNetError> for TuneError {
    fn from(e: ToyNetError) -> Self {
        TuneError::Model(e)
    }
}

fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<(), TuneError> {
    if expected == found {
        Ok(())
    } else {
        Err(TuneError::DimensionMismatch { what, expected, found })
    }
}

/// Stacked least-squares system `min_u ‖A u − b‖²`, one column per unit and
/// one row per (sample, output coordinate).
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionSystem {
    pub design: Matrix,
    pub rhs: Vec<f64>,
}

/// How the linear system is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Linearization {
    /// Columns `c_i(x)` at the clean input; the `m`-dependent input-shift term
    /// is frozen at the binary mask: `b = −(Δx + Σ_i m_i (c_i(x') − c_i(x)) + Δr)`.
    /// For linear units this is `b = −(Σ m_i W_i + I) Δx` (plus `Δr`).
    CleanInput,
    /// Columns `c_i(x')` at the masked input with `b = −(Δx + Σ_i (c_i(x') −
    /// c_i(x)) + Δr)`. This is exactly `E(m)`, so the solution minimizes the
    /// reconstruction objective itself.
    #[default]
    MaskedInput,
}

/// One calibration sample seen from a single sub-layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SublayerSample {
    pub clean_input: Vec<f64>,
    pub masked_input: Vec<f64>,
    /// `c_i(x)` for every unit.
    pub units_clean: Vec<Vec<f64>>,
    /// `c_i(x')` for every unit.
    pub units_masked: Vec<Vec<f64>>,
    pub rest_clean: Vec<f64>,
    pub rest_masked: Vec<f64>,
}

impl SublayerSample {
    /// Sample for a sub-layer with no ungated remainder.
    pub fn without_rest(
        clean_input: Vec<f64>,
        masked_input: Vec<f64>,
        units_clean: Vec<Vec<f64>>,
        units_masked: Vec<Vec<f64>>,
    ) -> Self {
        let d = clean_input.len();
        Self { clean_input, masked_input, units_clean, units_masked, rest_clean: vec![0.0; d], rest_masked: vec![0.0; d] }
    }

    fn check(&self, units: usize) -> Result<(), TuneError> {
        let d = self.clean_input.len();
        check_dim("masked input", d, self.masked_input.len())?;
        check_dim("clean unit count", units, self.units_clean.len())?;
        check_dim("masked unit count", units, self.units_masked.len())?;
        for c in self.units_clean.iter().chain(&self.units_masked) {
            check_dim("unit output", d, c.len())?;
        }
        check_dim("clean remainder", d, self.rest_clean.len())?;
        check_dim("masked remainder", d, self.rest_masked.len())?;
        Ok(())
    }
}

/// Evaluates one sub-layer on aligned clean and masked inputs.
pub fn sublayer_samples(
    layer: &ToyLayer,
    adapter: Option<&HydraAdapter>,
    component: Component,
    x_clean: &[Vec<f64>],
    x_masked: &[Vec<f64>],
) -> Result<Vec<SublayerSample>, TuneError> {
    check_dim("calibration samples", x_clean.len(), x_masked.len())?;
    let d = layer.model_dim();
    x_clean
        .iter()
        .zip(x_masked)
        .map(|(x, xm)| {
            check_dim("clean input", d, x.len())?;
            check_dim("masked input", d, xm.len())?;
            let rest = |v: &[f64]| match adapter {
                Some(a) => a.delta(v),
                None => Ok(vec![0.0; d]),
            };
            Ok(SublayerSample {
                clean_input: x.clone(),
                masked_input: xm.clone(),
                units_clean: layer.unit_contributions(component, x),
                units_masked: layer.unit_contributions(component, xm),
                rest_clean: rest(x)?,
                rest_masked: rest(xm)?,
            })
        })
        .collect()
}

/// Assembles the system from per-sample unit responses. `binary` holds the
/// refinement-stage mask values (0 or 1) of the sub-layer's units.
pub fn build_system_from_samples(
    samples: &[SublayerSample],
    binary: &[f64],
    linearization: Linearization,
) -> Result<ReconstructionSystem, TuneError> {
    let units = binary.len();
    let d = samples.first().map_or(0, |s| s.clean_input.len());
    let mut design = Matrix::zeros(samples.len() * d, units);
    let mut rhs = Vec::with_capacity(samples.len() * d);
    for (s_idx, s) in samples.iter().enumerate() {
        check_dim("sample dimension", d, s.clean_input.len())?;
        s.check(units)?;
        let columns = match linearization {
            Linearization::CleanInput => &s.units_clean,
            Linearization::MaskedInput => &s.units_masked,
        };
        for t in 0..d {
            let row = s_idx * d + t;
            for (i, col) in columns.iter().enumerate() {
                design.set(row, i, col[t]);
            }
            let mut shift = (s.masked_input[t] - s.clean_input[t]) + (s.rest_masked[t] - s.rest_clean[t]);
            for i in 0..units {
                let weight = match linearization {
                    Linearization::CleanInput => binary[i],
                    Linearization::MaskedInput => 1.0,
                };
                shift += weight * (s.units_masked[i][t] - s.units_clean[i][t]);
            }
            rhs.push(-shift);
        }
    }
    Ok(ReconstructionSystem { design, rhs })
}

/// [`build_system_from_samples`] for one sub-layer of a toy layer.
#[allow(clippy::too_many_arguments)]
pub fn build_system(
    layer: &ToyLayer,
    adapter: Option<&HydraAdapter>,
    component: Component,
    binary: &[f64],
    x_clean: &[Vec<f64>],
    x_masked: &[Vec<f64>],
    linearization: Linearization,
) -> Result<ReconstructionSystem, TuneError> {
    check_dim("binary mask", layer.num_units(component), binary.len())?;
    let samples = sublayer_samples(layer, adapter, component, x_clean, x_masked)?;
    build_system_from_samples(&samples, binary, linearization)
}

/// Solution of a reconstruction system.
#[derive(Debug, Clone, PartialEq)]
pub struct Relaxation {
    /// `m* = u* + 1`
    pub values: Vec<f64>,
    /// Ridge actually used (0 when the plain normal equations were solved).
    pub ridge: f64,
}

impl Relaxation {
    pub fn offsets(&self) -> Vec<f64> {
        self.values.iter().map(|m| m - 1.0).collect()
    }
}

/// Pivot ratio below which the plain normal equations are considered
/// ill-conditioned and the ridge is switched on.
const CONDITION_FLOOR: f64 = 1e-12;

/// Solves `(AᵀA + λI) u = Aᵀb` and returns `m = u + 1`.
///
/// `λ = 0` when `AᵀA` factors with a healthy pivot ratio, otherwise
/// `λ = 1e-8 · trace(AᵀA) / N`. An all-zero design gives `u = 0`.
pub fn solve_relaxation(sys: &ReconstructionSystem) -> Result<Relaxation, TuneError> {
    check_dim("right-hand side", sys.design.rows(), sys.rhs.len())?;
    if !sys.design.is_finite() || sys.rhs.iter().any(|v| !v.is_finite()) {
        return Err(TuneError::NonFiniteSystem);
    }
    let n = sys.design.cols();
    let mut g = gram(&sys.design);
    let atb = sys.design.matvec_t(&sys.rhs);
    let trace: f64 = (0..n).map(|i| g.get(i, i)).sum();
    if n == 0 || trace == 0.0 {
        return Ok(Relaxation { values: vec![1.0; n], ridge: 0.0 });
    }
    if let Some((l, ratio)) = cholesky(&g) {
        if ratio > CONDITION_FLOOR {
            let u = cholesky_solve(&l, &atb);
            return Ok(Relaxation { values: u.iter().map(|v| v + 1.0).collect(), ridge: 0.0 });
        }
    }
    let ridge = 1e-8 * trace / n as f64;
    for i in 0..n {
        g.add_at(i, i, ridge);
    }
    let (l, _) = cholesky(&g).ok_or(TuneError::NonFiniteSystem)?;
    let u = cholesky_solve(&l, &atb);
    if u.iter().any(|v| !v.is_finite()) {
        return Err(TuneError::NonFiniteSystem);
    }
    Ok(Relaxation { values: u.iter().map(|v| v + 1.0).collect(), ridge })
}

/// `E(m)`: squared distance between the masked sub-layer output on `x'` and
/// the unmasked output on `x`, summed over samples.
pub fn reconstruction_error(samples: &[SublayerSample], mask: &[f64]) -> f64 {
    samples
        .iter()
        .map(|s| {
            let d = s.clean_input.len();
            let mut masked_out = s.masked_input.clone();
            let mut clean_out = s.clean_input.clone();
            for t in 0..d {
                for (i, &m) in mask.iter().enumerate() {
                    masked_out[t] += m * s.units_masked[i][t];
                    clean_out[t] += s.units_clean[i][t];
                }
                masked_out[t] += s.rest_masked[t];
                clean_out[t] += s.rest_clean[t];
            }
            masked_out.iter().zip(&clean_out).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub layer: usize,
    pub component: Component,
    pub binary_error: f64,
    pub tuned_error: f64,
    pub ridge: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub masks: Vec<ContinuousMask>,
    /// Two entries per layer, attention first.
    pub reports: Vec<ComponentReport>,
}

/// Traces of the unmasked and of the binary-masked network on every
/// calibration input.
pub struct CalibrationTraces {
    pub clean: Vec<Trace>,
    pub masked: Vec<Trace>,
}

pub fn calibration_traces(
    net: &ToyNetwork,
    adapters: &[LayerAdapters],
    binary: &[ContinuousMask],
    calib: &Dataset,
) -> Result<CalibrationTraces, TuneError> {
    calib.check(Some(net.model_dim()))?;
    let ones: Vec<ContinuousMask> = net
        .layers
        .iter()
        .map(|l| ContinuousMask::ones(l.num_heads(), l.num_neurons()))
        .collect();
    let mut clean = Vec::with_capacity(calib.len());
    let mut masked = Vec::with_capacity(calib.len());
    for x in &calib.inputs {
        clean.push(forward(net, adapters, Some(&ones), x)?.1);
        masked.push(forward(net, adapters, Some(binary), x)?.1);
    }
    Ok(CalibrationTraces { clean, masked })
}

/// Binary masks of every layer as 0/1 gate values.
pub fn binary_gates(net: &ToyNetwork, binary: &[MaskSolution]) -> Result<Vec<ContinuousMask>, TuneError> {
    check_dim("mask layers", net.num_layers(), binary.len())?;
    net.layers
        .iter()
        .zip(binary)
        .map(|(l, s)| {
            if s.masked_heads.iter().any(|&i| i >= l.num_heads())
                || s.masked_neurons.iter().any(|&j| j >= l.num_neurons())
            {
                return Err(TuneError::DimensionMismatch {
                    what: "masked index",
                    expected: l.num_heads().max(l.num_neurons()),
                    found: s.masked_heads.iter().chain(&s.masked_neurons).copied().max().unwrap_or(0),
                });
            }
            Ok(s.to_continuous(l.num_heads(), l.num_neurons()))
        })
        .collect()
}

/// Tunes both components of layer `k`, attention first.
pub fn tune_layer(
    net: &ToyNetwork,
    adapters: &[LayerAdapters],
    k: usize,
    binary: &ContinuousMask,
    traces: &CalibrationTraces,
    linearization: Linearization,
) -> Result<(ContinuousMask, [ComponentReport; 2]), TuneError> {
    let layer = &net.layers[k];
    let la = adapters.get(k);
    let mut tuned = binary.clone();
    let mut reports = Vec::with_capacity(2);
    for component in [Component::Head, Component::Neuron] {
        let x_clean: Vec<Vec<f64>> = traces.clean.iter().map(|t| t.input(k, component).to_vec()).collect();
        let x_masked: Vec<Vec<f64>> = traces.masked.iter().map(|t| t.input(k, component).to_vec()).collect();
        let adapter = la.and_then(|a| match component {
            Component::Head => a.mha.as_ref(),
            Component::Neuron => a.ffn.as_ref(),
        });
        let samples = sublayer_samples(layer, adapter, component, &x_clean, &x_masked)?;
        let binary_values = binary.values(component);
        let sys = build_system_from_samples(&samples, binary_values, linearization)?;
        let relaxed = solve_relaxation(&sys)?;
        reports.push(ComponentReport {
            layer: k,
            component,
            binary_error: reconstruction_error(&samples, binary_values),
            tuned_error: reconstruction_error(&samples, &relaxed.values),
            ridge: relaxed.ridge,
        });
        *tuned.values_mut(component) = relaxed.values;
    }
    let [a, b]: [ComponentReport; 2] = reports.try_into().expect("two components");
    Ok((tuned, [a, b]))
}

/// Tunes every layer. Each sub-layer's `x'` comes from the network with all
/// binary masks applied; its own gating is not part of `x'`.
pub fn tune_all_layers(
    net: &ToyNetwork,
    adapters: &[LayerAdapters],
    binary: &[MaskSolution],
    calib: &Dataset,
    linearization: Linearization,
) -> Result<TuneOutcome, TuneError> {
    let gates = binary_gates(net, binary)?;
    let traces = calibration_traces(net, adapters, &gates, calib)?;
    let mut masks = Vec::with_capacity(net.num_layers());
    let mut reports = Vec::with_capacity(2 * net.num_layers());
    for (k, g) in gates.iter().enumerate() {
        let (m, r) = tune_layer(net, adapters, k, g, &traces, linearization)?;
        masks.push(m);
        reports.extend(r);
    }
    Ok(TuneOutcome { masks, reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_sample(x: f64, x_masked: f64, w: f64) -> SublayerSample {
        SublayerSample::without_rest(vec![x], vec![x_masked], vec![vec![w * x]], vec![vec![w * x_masked]])
    }

    #[test]
    fn scalar_system_clean_linearization() {
        let s = scalar_sample(3.0, 2.5, 2.0);
        let sys = build_system_from_samples(&[s], &[0.0], Linearization::CleanInput).unwrap();
        assert_eq!(sys.design, Matrix::from_rows(&[&[6.0]]));
        assert_eq!(sys.rhs, vec![0.5]);
        let m = solve_relaxation(&sys).unwrap();
        assert_eq!(m.ridge, 0.0);
        assert!((m.values[0] - (1.0 + 1.0 / 12.0)).abs() < 1e-15);
    }

    #[test]
    fn two_samples_stack() {
        let s = [scalar_sample(3.0, 3.0, 2.0), scalar_sample(1.0, 1.0, 2.0)];
        let sys = build_system_from_samples(&s, &[1.0], Linearization::CleanInput).unwrap();
        assert_eq!(sys.design, Matrix::from_rows(&[&[6.0], &[2.0]]));
        assert_eq!(sys.rhs, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_shift_gives_ones() {
        for lin in [Linearization::CleanInput, Linearization::MaskedInput] {
            let s = [scalar_sample(3.0, 3.0, 2.0), scalar_sample(-1.0, -1.0, 2.0)];
            let sys = build_system_from_samples(&s, &[0.0], lin).unwrap();
            assert!(sys.rhs.iter().all(|&b| b == 0.0));
            assert_eq!(solve_relaxation(&sys).unwrap().values, vec![1.0]);
        }
    }

    #[test]
    fn masked_linearization_is_exact() {
        let s = [scalar_sample(3.0, 2.5, 2.0)];
        let sys = build_system_from_samples(&s, &[0.0], Linearization::MaskedInput).unwrap();
        // x' + m·2x' = x + 2x  →  2.5 + 5m = 9
        let m = solve_relaxation(&sys).unwrap().values[0];
        assert!((m - 1.3).abs() < 1e-14);
        assert!(reconstruction_error(&s, &[m]) < 1e-24);
    }

    #[test]
    fn singular_design_uses_ridge() {
        // Two identical columns.
        let sys = ReconstructionSystem {
            design: Matrix::from_rows(&[&[1.0, 1.0], &[2.0, 2.0]]),
            rhs: vec![1.0, 2.0],
        };
        let r = solve_relaxation(&sys).unwrap();
        assert!(r.ridge > 0.0);
        let u = r.offsets();
        let res: Vec<f64> = sys.design.matvec(&u).iter().zip(&sys.rhs).map(|(a, b)| a - b).collect();
        let grad = sys.design.matvec_t(&res);
        let bound = r.ridge * crate::linalg::norm(&u) + 1e-8;
        assert!(crate::linalg::norm(&grad) <= bound);
    }

    #[test]
    fn zero_design_and_non_finite() {
        let sys = ReconstructionSystem { design: Matrix::zeros(2, 2), rhs: vec![1.0, 1.0] };
        assert_eq!(solve_relaxation(&sys).unwrap().values, vec![1.0, 1.0]);
        let sys = ReconstructionSystem { design: Matrix::from_rows(&[&[f64::NAN]]), rhs: vec![1.0] };
        assert_eq!(solve_relaxation(&sys), Err(TuneError::NonFiniteSystem));
    }
}
