//! DC-microgrid case study: averaged buck-converter DGU models, the network
//! of resistive lines, and equilibrium / feedforward computation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::discretization::{discretize_network_lm, matrix_exponential_pair, DiscreteSystem};
use crate::model::{ContinuousNetwork, ContinuousSubsystem, CouplingGraph, NetworkModel};
use crate::{Error, Result};

pub const DEFAULT_CONFIG_JSON: &str = include_str!("../data/default_microgrid.json");

/// Physical parameters of one distributed generation unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DguParams {
    /// Source voltage (V).
    pub v_in: f64,
    /// Converter resistance (Ω).
    pub r: f64,
    /// Inductance (H).
    pub l: f64,
    /// Capacitance (F).
    pub c: f64,
    /// Load current (A).
    pub load: f64,
    /// Integrator coefficient (1/s); `1/Ts` when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl DguParams {
    pub fn validate(&self, index: usize) -> Result<()> {
        for (name, v) in [("v_in", self.v_in), ("r", self.r), ("l", self.l), ("c", self.c)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("DGU {}: {name} must be positive, got {v}", index + 1)));
            }
        }
        if !(self.load >= 0.0 && self.load.is_finite()) {
            return Err(Error::Parameter(format!("DGU {}: load must be nonnegative", index + 1)));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Parameter(format!("DGU {}: alpha must be positive", index + 1)));
            }
        }
        Ok(())
    }
}

/// A resistive line `(i, j, R_ij)` between two DGUs, 1-based in JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line(pub usize, pub usize, pub f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrogridConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub sampling_time: f64,
    pub dgus: Vec<DguParams>,
    pub lines: Vec<Line>,
    /// Voltage references (V); `50 + 0.01(i−1)(−1)^i` when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<Vec<f64>>,
}

/// `V_ri = 50 + 0.01(i−1)(−1)^i` for 1-based `i`.
pub fn default_references(count: usize) -> Vec<f64> {
    (1..=count)
        .map(|i| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            50.0 + 0.01 * (i as f64 - 1.0) * sign
        })
        .collect()
}

impl MicrogridConfig {
    pub fn default_six_dgu() -> Self {
        serde_json::from_str(DEFAULT_CONFIG_JSON).expect("bundled microgrid config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sampling_time > 0.0 && self.sampling_time.is_finite()) {
            return Err(Error::Parameter("sampling_time must be positive".into()));
        }
        if self.dgus.is_empty() {
            return Err(Error::Parameter("at least one DGU is required".into()));
        }
        for (i, d) in self.dgus.iter().enumerate() {
            d.validate(i)?;
        }
        if let Some(r) = &self.references {
            if r.len() != self.dgus.len() {
                return Err(Error::Dimension(format!(
                    "{} references for {} DGUs",
                    r.len(),
                    self.dgus.len()
                )));
            }
        }
        self.line_pairs().map(|_| ())
    }

    pub fn references(&self) -> Vec<f64> {
        self.references
            .clone()
            .unwrap_or_else(|| default_references(self.dgus.len()))
    }

    pub fn loads(&self) -> Vec<f64> {
        self.dgus.iter().map(|d| d.load).collect()
    }

    pub fn alpha(&self, index: usize) -> f64 {
        self.dgus[index].alpha.unwrap_or(1.0 / self.sampling_time)
    }

    /// Undirected 0-based pairs with weight `1/R_ij`. A line listed in both
    /// orientations must carry the same resistance.
    fn line_pairs(&self) -> Result<Vec<(usize, usize, f64)>> {
        let count = self.dgus.len();
        let mut seen: Vec<((usize, usize), f64)> = Vec::new();
        for &Line(i, j, r) in &self.lines {
            if i == 0 || j == 0 || i > count || j > count {
                return Err(Error::Graph(format!("line ({i}, {j}) references a missing DGU")));
            }
            if i == j {
                return Err(Error::Graph(format!("line ({i}, {j}) is a self-loop")));
            }
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Parameter(format!("line ({i}, {j}) has resistance {r}")));
            }
            let key = (i.min(j) - 1, i.max(j) - 1);
            match seen.iter().find(|(k, _)| *k == key) {
                Some((_, prev)) if *prev != r => {
                    return Err(Error::Graph(format!(
                        "asymmetric line list: ({i}, {j}) has resistances {prev} and {r}"
                    )))
                }
                Some(_) => {}
                None => seen.push((key, r)),
            }
        }
        Ok(seen.into_iter().map(|((a, b), r)| (a, b, 1.0 / r)).collect())
    }

    pub fn graph(&self) -> Result<CouplingGraph> {
        CouplingGraph::undirected(self.dgus.len(), &self.line_pairs()?)
    }
}

/// Averaged DGU model with state `[V, I − I_l, s]` and input
/// `u = d − R·I_l/V_in`.
pub fn build_dgu(params: &DguParams, alpha: f64) -> Result<ContinuousSubsystem> {
    params.validate(0)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!("alpha must be positive, got {alpha}")));
    }
    let DguParams { v_in, r, l, c, .. } = *params;
    let a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0 / c, 0.0, -1.0 / l, -r / l, 0.0, alpha, 0.0, 0.0]);
    let b = DMatrix::from_row_slice(3, 1, &[0.0, v_in / l, 0.0]);
    let f = DMatrix::from_row_slice(3, 1, &[1.0 / c, 0.0, 0.0]);
    let cm = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
    ContinuousSubsystem::new(a, b, f, cm)
}

pub fn build_network(config: &MicrogridConfig) -> Result<ContinuousNetwork> {
    config.validate()?;
    let subs = config
        .dgus
        .iter()
        .enumerate()
        .map(|(i, d)| build_dgu(d, config.alpha(i)))
        .collect::<Result<Vec<_>>>()?;
    ContinuousNetwork::new(subs, config.graph()?)
}

/// Everything needed to synthesize on the LM model and simulate on the exact
/// one.
#[derive(Debug, Clone)]
pub struct MicrogridPlant {
    pub config: MicrogridConfig,
    pub continuous: ContinuousNetwork,
    pub lm: NetworkModel,
    /// Exact discretization; `b` maps the inputs `u`.
    pub exact: DiscreteSystem,
    /// Exact discretization of the integrator feedforward channel `s_f`.
    pub integrator_input: DMatrix<f64>,
}

impl MicrogridPlant {
    pub fn new(config: MicrogridConfig) -> Result<Self> {
        let continuous = build_network(&config)?;
        let ts = config.sampling_time;
        let lm = discretize_network_lm(&continuous, ts)?;
        let g = continuous.assemble(None)?;
        let (n, count) = (continuous.n(), continuous.len());
        let mut b_aug = DMatrix::zeros(n, 2 * count);
        b_aug.columns_mut(0, count).copy_from(&g.b);
        for i in 0..count {
            b_aug[(3 * i + 2, count + i)] = config.alpha(i);
        }
        let (a, b) = matrix_exponential_pair(&g.a, &b_aug, ts)?;
        Ok(Self {
            exact: DiscreteSystem {
                a,
                b: b.columns(0, count).into_owned(),
            },
            integrator_input: b.columns(count, count).into_owned(),
            config,
            continuous,
            lm,
        })
    }

    pub fn dgu_count(&self) -> usize {
        self.config.dgus.len()
    }

    pub fn n(&self) -> usize {
        self.exact.n()
    }

    /// `(u_f, s_f)` with `u_f = −V_r/V_in + K·(−x_ref)` and `s_f = −V_r`,
    /// where `x_ref` stacks `[V_r, 0, 0]` per DGU.
    pub fn feedforward(&self, gain: &DMatrix<f64>, references: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        let count = self.dgu_count();
        self.check_gain(gain)?;
        if references.len() != count {
            return Err(Error::Dimension(format!("{} references for {count} DGUs", references.len())));
        }
        let mut x_ref = DVector::zeros(self.n());
        for (i, &v) in references.iter().enumerate() {
            x_ref[3 * i] = v;
        }
        let kx = gain * (-x_ref);
        let u_f = DVector::from_fn(count, |i, _| -references[i] / self.config.dgus[i].v_in + kx[i]);
        let s_f = DVector::from_fn(count, |i, _| -references[i]);
        Ok((u_f, s_f))
    }

    fn check_gain(&self, gain: &DMatrix<f64>) -> Result<()> {
        if gain.shape() != (self.dgu_count(), self.n()) {
            return Err(Error::Dimension(format!(
                "gain is {:?}, expected {:?}",
                gain.shape(),
                (self.dgu_count(), self.n())
            )));
        }
        Ok(())
    }

    /// Closed-loop affine map `x⁺ = A_cl x + c` of the exact model.
    pub fn closed_loop(&self, gain: &DMatrix<f64>, u_f: &DVector<f64>, s_f: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
        self.check_gain(gain)?;
        let a_cl = &self.exact.a + &self.exact.b * gain;
        let c = &self.exact.b * u_f + &self.integrator_input * s_f;
        Ok((a_cl, c))
    }

    /// Steady state of the exact closed loop, from `(I − A_cl) x* = c`.
    pub fn equilibrium(&self, gain: &DMatrix<f64>, references: &[f64], loads: &[f64]) -> Result<Equilibrium> {
        if loads.len() != self.dgu_count() {
            return Err(Error::Dimension(format!("{} loads for {} DGUs", loads.len(), self.dgu_count())));
        }
        let (u_f, s_f) = self.feedforward(gain, references)?;
        let (a_cl, c) = self.closed_loop(gain, &u_f, &s_f)?;
        let n = self.n();
        let lhs = DMatrix::identity(n, n) - a_cl;
        let lu = lhs.clone().lu();
        let x = lu.solve(&c).ok_or(Error::SingularEquilibrium)?;
        let scale = lhs.amax().max(1.0);
        let cond_probe = lu.u().diagonal().iter().map(|d| d.abs()).fold(f64::INFINITY, f64::min);
        if cond_probe <= 1e-14 * scale || !x.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularEquilibrium);
        }
        let u = gain * &x + &u_f;
        Ok(Equilibrium {
            x,
            u,
            u_f,
            s_f,
            references: references.to_vec(),
            loads: loads.to_vec(),
        })
    }

    /// Duty cycle `d = u + R·I_l/V_in` for the total applied input `u`.
    pub fn duty_cycles(&self, u: &DVector<f64>, loads: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.dgu_count(), |i, _| {
            let d = &self.config.dgus[i];
            u[i] + d.r * loads[i] / d.v_in
        })
    }
}

/// Closed-loop steady state in shifted coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub x: DVector<f64>,
    /// Total steady input `K x* + u_f`.
    pub u: DVector<f64>,
    pub u_f: DVector<f64>,
    pub s_f: DVector<f64>,
    pub references: Vec<f64>,
    pub loads: Vec<f64>,
}

impl Equilibrium {
    pub fn voltage(&self, i: usize) -> f64 {
        self.x[3 * i]
    }

    /// Physical converter current `I_r = x₂* + I_l`.
    pub fn current(&self, i: usize) -> f64 {
        self.x[3 * i + 1] + self.loads[i]
    }

    pub fn integrator(&self, i: usize) -> f64 {
        self.x[3 * i + 2]
    }
}
