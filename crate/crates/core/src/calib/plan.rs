//! Model-wide calibration: one histogram per quantized site, finalized into
//! a plan of quantization parameters.
//!
//! Site ids are `s{k}/input`, `s{k}/act{L}` and `s{k}/w{L}` for student `k`
//! and conv layer index `L`.

use serde::{Deserialize, Serialize};

use super::histogram::RunningHistogram;
use super::search::{entropy_calibrate, l2_calibrate, minmax_calibrate, Objective};
use super::source::CalibrationSource;
use crate::distill::{DistilledModel, StudentNet};
use crate::error::{Error, Result};
use crate::model::{apply_layer, ModelDef, Network};
use crate::qnet::{ConvQuant, NetQuant};
use crate::quant::{compute_qparams, QuantMode, QuantParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteKind {
    Weight,
    Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub site_id: String,
    pub kind: SiteKind,
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u8,
    pub qmin: i32,
    pub qmax: i32,
    pub objective: Objective,
}

impl PlanEntry {
    pub fn new(site_id: String, kind: SiteKind, qp: &QuantParams, objective: Objective) -> Self {
        Self {
            site_id,
            kind,
            scale: qp.scale,
            zero_point: qp.zero_point,
            bits: qp.bits,
            qmin: qp.qmin,
            qmax: qp.qmax,
            objective,
        }
    }

    pub fn qparams(&self) -> Result<QuantParams> {
        QuantParams::from_parts(self.scale, self.zero_point, self.bits, self.qmin, self.qmax)
            .map_err(|e| Error::PlanMismatch(format!("site {}: {e}", self.site_id)))
    }
}

/// Quantization parameters for every quantized site of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPlan {
    /// Tag of the calibration data: `train` or `random-normal`.
    pub source: String,
    pub entries: Vec<PlanEntry>,
}

pub fn input_site(student: usize) -> String {
    format!("s{student}/input")
}

pub fn activation_site(student: usize, layer: usize) -> String {
    format!("s{student}/act{layer}")
}

pub fn weight_site(student: usize, layer: usize) -> String {
    format!("s{student}/w{layer}")
}

/// Every site id a plan must cover for students with these definitions.
pub fn required_sites(defs: &[&ModelDef]) -> Vec<String> {
    let mut v = Vec::new();
    for (k, def) in defs.iter().enumerate() {
        v.push(input_site(k));
        for l in def.conv_layers() {
            v.push(weight_site(k, l));
            v.push(activation_site(k, l));
        }
    }
    v
}

impl CalibrationPlan {
    pub fn get(&self, site_id: &str) -> Option<&PlanEntry> {
        self.entries.iter().find(|e| e.site_id == site_id)
    }

    /// Activation objective recorded in the plan.
    pub fn objective(&self) -> Option<Objective> {
        self.entries.iter().find(|e| e.kind == SiteKind::Activation).map(|e| e.objective)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: CalibrationPlan = serde_json::from_str(s)?;
        for e in &plan.entries {
            e.qparams()?;
        }
        Ok(plan)
    }

    /// Fails with the list of missing sites unless every required site has
    /// exactly one entry.
    pub fn check_covers(&self, defs: &[&ModelDef]) -> Result<()> {
        let required = required_sites(defs);
        let missing: Vec<&str> = required
            .iter()
            .filter(|s| self.get(s).is_none())
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::PlanMismatch(format!("missing sites: {}", missing.join(", "))));
        }
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.site_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::PlanMismatch(format!("duplicate site {}", w[0])));
        }
        let extra: Vec<&str> = ids.into_iter().filter(|s| !required.iter().any(|r| r == s)).collect();
        if !extra.is_empty() {
            return Err(Error::PlanMismatch(format!("unknown sites: {}", extra.join(", "))));
        }
        Ok(())
    }

    /// Network quantization parameters for student `k`.
    pub fn net_quant(&self, k: usize, def: &ModelDef) -> Result<NetQuant> {
        let get = |id: String| {
            self.get(&id)
                .ok_or_else(|| Error::PlanMismatch(format!("missing sites: {id}")))?
                .qparams()
        };
        let input = get(input_site(k))?;
        let convs = def
            .conv_layers()
            .into_iter()
            .map(|l| {
                Ok(ConvQuant {
                    layer: l,
                    weight: get(weight_site(k, l))?,
                    activation: get(activation_site(k, l))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NetQuant { input, convs })
    }
}

/// Clip range for `objective` over a finished histogram.
pub fn finalize(h: &RunningHistogram, objective: Objective, bits: u8) -> Result<(f64, f64)> {
    match objective {
        Objective::MinMax => minmax_calibrate(h),
        Objective::Entropy => entropy_calibrate(h, bits),
        Objective::L2 => l2_calibrate(h, bits),
    }
}

/// Weight parameters: symmetric around the largest magnitude.
pub fn weight_qparams(w: &Tensor, bits: u8) -> Result<QuantParams> {
    let m = f64::from(w.data().iter().fold(0.0f32, |a, v| a.max(v.abs())));
    let m = if m > 0.0 { m } else { 1.0 };
    compute_qparams(-m, m, bits, QuantMode::SymmetricSigned)
}

/// Float activations at the input and at every conv activation site.
struct Observer {
    input: RunningHistogram,
    sites: Vec<(usize, RunningHistogram)>,
}

impl Observer {
    fn new(def: &ModelDef) -> Self {
        Self {
            input: RunningHistogram::new(RunningHistogram::DEFAULT_BINS),
            sites: def
                .conv_layers()
                .into_iter()
                .map(|l| (l, RunningHistogram::new(RunningHistogram::DEFAULT_BINS)))
                .collect(),
        }
    }

    fn observe(&mut self, net: &Network, x: &Tensor) -> Result<()> {
        self.input.observe(x)?;
        let slots = net.def.param_slots();
        let site_at: Vec<Option<usize>> = {
            let mut v = vec![None; net.def.layers.len()];
            for (i, (l, _)) in self.sites.iter().enumerate() {
                v[net.def.activation_site_layer(*l)] = Some(i);
            }
            v
        };
        let mut cur = x.clone();
        for (index, layer) in net.def.layers.iter().enumerate() {
            cur = apply_layer(index, layer, &cur, &net.params, slots[index])?;
            if let Some(i) = site_at[index] {
                self.sites[i].1.observe(&cur)?;
            }
        }
        Ok(())
    }
}

/// Streams every calibration batch through the float students and returns
/// a plan covering all of their quantized sites.
pub fn calibrate_model(
    model: &DistilledModel,
    source: &CalibrationSource,
    objective: Objective,
    bits: u8,
) -> Result<CalibrationPlan> {
    let nets: Vec<&Network> = model
        .students
        .iter()
        .map(|s| match s {
            StudentNet::Float(n) => Ok(n),
            StudentNet::Quantized(_) => Err(Error::InvalidArgument("calibration needs float students".into())),
        })
        .collect::<Result<_>>()?;
    let mut observers: Vec<Observer> = nets.iter().map(|n| Observer::new(&n.def)).collect();
    for batch in source.batches()? {
        for image in &batch {
            let t = model.teacher_features(image)?;
            let input = model.student_input(image, &t);
            for (obs, net) in observers.iter_mut().zip(&nets) {
                obs.observe(net, &input)?;
            }
        }
    }
    let mut entries = Vec::new();
    for (k, (obs, net)) in observers.iter().zip(&nets).enumerate() {
        let site = |id: String, h: &RunningHistogram| -> Result<PlanEntry> {
            if h.total_count() == 0 {
                return Err(Error::PlanMismatch(format!("site {id} has no observations")));
            }
            let (a, b) = finalize(h, objective, bits)?;
            let qp = compute_qparams(a, b, bits, QuantMode::AffineUnsigned)?;
            Ok(PlanEntry::new(id, SiteKind::Activation, &qp, objective))
        };
        entries.push(site(input_site(k), &obs.input)?);
        let slots = net.def.param_slots();
        for (l, h) in &obs.sites {
            let (wi, _) = slots[*l].expect("conv slot");
            let wq = weight_qparams(&net.params[wi], bits)?;
            entries.push(PlanEntry::new(weight_site(k, *l), SiteKind::Weight, &wq, Objective::MinMax));
            entries.push(site(activation_site(k, *l), h)?);
        }
    }
    Ok(CalibrationPlan {
        source: source.tag().to_string(),
        entries,
    })
}
