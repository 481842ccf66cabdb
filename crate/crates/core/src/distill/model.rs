//! Teacher/student model container and inference.

use serde::{Deserialize, Serialize};

use super::losses::{self, AnomalyMap, Combine, LossSpec, UsStats};
use crate::calib::CalibrationPlan;
use crate::error::{Error, Result};
use crate::model::{conv, FeaturePyramid, Layer, ModelDef, Network};
use crate::qnet::QuantizedNetwork;
use crate::quant::to_half_precision;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum Scheme {
    Stfpm,
    Rd,
    Us { n_students: usize },
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Stfpm => "stfpm",
            Scheme::Rd => "rd",
            Scheme::Us { .. } => "us",
        }
    }

    pub fn loss(&self) -> LossSpec {
        match self {
            Scheme::Stfpm => LossSpec::Stfpm,
            Scheme::Rd => LossSpec::RdCosine,
            Scheme::Us { .. } => LossSpec::UsRegression,
        }
    }

    pub fn n_students(&self) -> usize {
        match self {
            Scheme::Us { n_students } => *n_students,
            _ => 1,
        }
    }

    /// Parses `stfpm`, `rd` or `us` (three students).
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stfpm" => Ok(Scheme::Stfpm),
            "rd" => Ok(Scheme::Rd),
            "us" => Ok(Scheme::Us { n_students: 3 }),
            _ => Err(Error::InvalidArgument(format!("unknown scheme {s:?}"))),
        }
    }
}

/// Numeric representation of the student(s). The teacher is always `f32`.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantState {
    Fp32,
    Fp16,
    Ptq(CalibrationPlan),
    Qat(CalibrationPlan),
}

impl QuantState {
    pub fn tag(&self) -> &'static str {
        match self {
            QuantState::Fp32 => "fp32",
            QuantState::Fp16 => "fp16",
            QuantState::Ptq(_) => "ptq-int8",
            QuantState::Qat(_) => "qat-int8",
        }
    }

    pub fn plan(&self) -> Option<&CalibrationPlan> {
        match self {
            QuantState::Ptq(p) | QuantState::Qat(p) => Some(p),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StudentNet {
    /// Float weights; under `Fp16` they are already rounded to binary16.
    Float(Network),
    Quantized(QuantizedNetwork),
}

impl StudentNet {
    pub fn def(&self) -> &ModelDef {
        match self {
            StudentNet::Float(n) => &n.def,
            StudentNet::Quantized(q) => &q.def,
        }
    }

    pub fn as_float(&self) -> Option<&Network> {
        match self {
            StudentNet::Float(n) => Some(n),
            StudentNet::Quantized(_) => None,
        }
    }
}

/// Input standardization `(x - mean) / std` applied to `[0, 1]` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f32,
    pub std: f32,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: 0.5, std: 0.25 }
    }
}

/// A frozen teacher, its trained student(s) and the scoring scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct DistilledModel {
    teacher: Network,
    pub students: Vec<StudentNet>,
    pub scheme: Scheme,
    pub quant_state: QuantState,
    pub us_stats: Option<UsStats>,
    pub norm: Normalization,
    /// Expected input `[C, H, W]`.
    pub input_shape: [usize; 3],
}

impl DistilledModel {
    pub fn new(
        teacher: Network,
        students: Vec<StudentNet>,
        scheme: Scheme,
        quant_state: QuantState,
        norm: Normalization,
        input_shape: [usize; 3],
    ) -> Result<Self> {
        let m = Self {
            teacher,
            students,
            scheme,
            quant_state,
            us_stats: None,
            norm,
            input_shape,
        };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        if let Scheme::Us { n_students } = self.scheme {
            if n_students < 2 {
                return Err(Error::InvalidArgument("the US scheme needs at least 2 students".into()));
            }
        }
        if self.students.len() != self.scheme.n_students() {
            return Err(Error::InvalidArgument(format!(
                "scheme {} expects {} student(s), got {}",
                self.scheme.name(),
                self.scheme.n_students(),
                self.students.len()
            )));
        }
        let t = self.teacher_features(&Tensor::zeros(&self.input_shape))?;
        let target = self.student_target(&t);
        let sin = self.student_input(&Tensor::zeros(&self.input_shape), &t);
        for (k, s) in self.students.iter().enumerate() {
            let (c, h, w) = sin.chw()?;
            let shapes = s.def().layer_shapes([c, h, w])?;
            let got: Vec<&[usize; 3]> = s.def().tap_points.iter().map(|&i| &shapes[i]).collect();
            let want: Vec<&[usize]> = target.maps.iter().map(Tensor::shape).collect();
            if got.len() != want.len() || got.iter().zip(&want).any(|(g, w)| g.as_slice() != *w) {
                return Err(Error::Shape(format!(
                    "student {k} taps {got:?} do not match teacher targets {want:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn teacher(&self) -> &Network {
        &self.teacher
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.input_shape[1], self.input_shape[2])
    }

    pub fn teacher_features(&self, image: &Tensor) -> Result<FeaturePyramid> {
        self.teacher.forward(image)
    }

    /// What the students consume: the image, or for the decoder scheme the
    /// teacher's deepest tap.
    pub fn student_input(&self, image: &Tensor, teacher: &FeaturePyramid) -> Tensor {
        match self.scheme {
            Scheme::Rd => teacher.maps.last().expect("teacher has taps").clone(),
            _ => image.clone(),
        }
    }

    /// What the students should reproduce, in student tap order.
    pub fn student_target(&self, teacher: &FeaturePyramid) -> FeaturePyramid {
        match self.scheme {
            Scheme::Rd => teacher.clone().reversed(),
            Scheme::Us { .. } => FeaturePyramid {
                maps: vec![teacher.maps.last().expect("teacher has taps").clone()],
            },
            Scheme::Stfpm => teacher.clone(),
        }
    }

    fn student_forward(&self, k: usize, input: &Tensor) -> Result<FeaturePyramid> {
        match (&self.students[k], &self.quant_state) {
            (StudentNet::Float(n), QuantState::Fp16) => forward_half(n, input),
            (StudentNet::Float(n), _) => n.forward(input),
            (StudentNet::Quantized(q), _) => q.forward(input),
        }
    }

    /// Student pyramids for one image, aligned with [`Self::student_target`].
    pub fn student_features(&self, image: &Tensor, teacher: &FeaturePyramid) -> Result<Vec<FeaturePyramid>> {
        let input = self.student_input(image, teacher);
        (0..self.students.len()).map(|k| self.student_forward(k, &input)).collect()
    }

    /// Anomaly map at input resolution.
    pub fn anomaly_map(&self, image: &Tensor, combine: Combine) -> Result<AnomalyMap> {
        let t = self.teacher_features(image)?;
        let target = self.student_target(&t);
        let students = self.student_features(image, &t)?;
        let (h, w) = self.image_size();
        match self.scheme {
            Scheme::Us { .. } => {
                let embs: Vec<Tensor> = students.into_iter().map(|mut p| p.maps.remove(0)).collect();
                let stats = self.us_stats.unwrap_or_default();
                let small = losses::us_score_map(&target.maps[0], &embs, &stats)?;
                AnomalyMap::new(tensor::bilinear_upsample(&small.scores, h, w)?)
            }
            _ => losses::anomaly_map(&target, &students[0], (h, w), combine),
        }
    }

    /// Mean training loss over `images` with the model's current students.
    pub fn distillation_loss(&self, images: &[Tensor]) -> Result<f64> {
        let mut total = 0.0;
        for image in images {
            let t = self.teacher_features(image)?;
            let target = self.student_target(&t);
            for s in self.student_features(image, &t)? {
                total += match self.scheme.loss() {
                    LossSpec::Stfpm => losses::stfpm_loss(&target, &s)?,
                    LossSpec::RdCosine => losses::rd_cosine_loss(&target, &s)?,
                    LossSpec::UsRegression => losses::us_regression_loss(&target, &s)?,
                };
            }
        }
        Ok(total / (images.len() * self.students.len()).max(1) as f64)
    }

    pub(crate) fn with_students(&self, students: Vec<StudentNet>, quant_state: QuantState) -> Result<Self> {
        let m = Self {
            teacher: self.teacher.clone(),
            students,
            scheme: self.scheme,
            quant_state,
            us_stats: self.us_stats,
            norm: self.norm,
            input_shape: self.input_shape,
        };
        m.check()?;
        Ok(m)
    }
}

/// Forward pass with every layer output rounded to binary16.
pub fn forward_half(net: &Network, input: &Tensor) -> Result<FeaturePyramid> {
    let (c, h, w) = input.chw()?;
    net.def.layer_shapes([c, h, w])?;
    let slots = net.def.param_slots();
    let mut cur = to_half_precision(input)?;
    let mut maps = Vec::new();
    let mut taps = net.def.tap_points.iter().peekable();
    for (index, layer) in net.def.layers.iter().enumerate() {
        cur = crate::model::apply_layer(index, layer, &cur, &net.params, slots[index])?;
        cur = to_half_precision(&cur).map_err(|e| Error::Layer {
            index,
            kind: layer.kind(),
            reason: e.to_string(),
        })?;
        if taps.peek() == Some(&&index) {
            maps.push(cur.clone());
            taps.next();
        }
    }
    Ok(FeaturePyramid { maps })
}

/// Four strided conv stages, 1 → 16 → 32 → 32 → 64 channels, tapped after
/// the last three ReLUs.
pub fn teacher_def(in_ch: usize) -> ModelDef {
    ModelDef::new(
        vec![
            conv(in_ch, 16, 3, 1, 1),
            Layer::Relu,
            conv(16, 32, 3, 2, 1),
            Layer::Relu,
            conv(32, 32, 3, 2, 1),
            Layer::Relu,
            conv(32, 64, 3, 2, 1),
            Layer::Relu,
        ],
        vec![3, 5, 7],
    )
    .expect("valid architecture")
}

/// Student architecture for a scheme given the teacher definition.
pub fn student_def(scheme: Scheme, teacher: &ModelDef) -> ModelDef {
    match scheme {
        Scheme::Stfpm => teacher.clone(),
        Scheme::Us { .. } => teacher
            .with_taps(vec![*teacher.tap_points.last().expect("taps")])
            .expect("valid taps"),
        Scheme::Rd => decoder_def(teacher),
    }
}

/// Decoder from the teacher's deepest tap back up through its two shallower
/// taps: 1x1 bottleneck, then conv / upsample stages whose outputs mirror
/// the teacher pyramid in reverse.
fn decoder_def(teacher: &ModelDef) -> ModelDef {
    let convs: Vec<_> = teacher
        .layers
        .iter()
        .filter_map(|l| match l {
            Layer::Conv(c) => Some(*c),
            _ => None,
        })
        .collect();
    let n = convs.len();
    let (c3, c2, c1) = (convs[n - 1].out_ch, convs[n - 2].out_ch, convs[n - 3].out_ch);
    ModelDef::new(
        vec![
            conv(c3, c3 / 2, 1, 1, 0),
            Layer::Relu,
            conv(c3 / 2, c3, 3, 1, 1),
            Layer::Relu,
            Layer::Upsample { factor: 2 },
            conv(c3, c2, 3, 1, 1),
            Layer::Relu,
            Layer::Upsample { factor: 2 },
            conv(c2, c1, 3, 1, 1),
            Layer::Relu,
        ],
        vec![3, 6, 9],
    )
    .expect("valid architecture")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(scheme: Scheme) -> DistilledModel {
        let t = Network::init(teacher_def(1), 1);
        let sdef = student_def(scheme, &t.def);
        let students = (0..scheme.n_students())
            .map(|k| StudentNet::Float(Network::init(sdef.clone(), 10 + k as u64)))
            .collect();
        DistilledModel::new(t, students, scheme, QuantState::Fp32, Normalization::default(), [1, 32, 32]).unwrap()
    }

    #[test]
    fn architectures_line_up() {
        for s in [Scheme::Stfpm, Scheme::Rd, Scheme::Us { n_students: 3 }] {
            let m = model(s);
            let x = Tensor::new(vec![1, 32, 32], (0..1024).map(|i| (i as f32 * 0.1).sin()).collect()).unwrap();
            let map = m.anomaly_map(&x, Combine::Sum).unwrap();
            assert_eq!(map.scores.shape(), [32, 32]);
        }
    }

    #[test]
    fn us_needs_two_students() {
        let t = Network::init(teacher_def(1), 1);
        let s = Scheme::Us { n_students: 1 };
        let sdef = student_def(s, &t.def);
        let r = DistilledModel::new(
            t,
            vec![StudentNet::Float(Network::init(sdef, 2))],
            s,
            QuantState::Fp32,
            Normalization::default(),
            [1, 32, 32],
        );
        assert!(r.is_err());
    }

    #[test]
    fn identical_student_zero_map() {
        let t = Network::init(teacher_def(1), 1);
        let m = DistilledModel::new(
            t.clone(),
            vec![StudentNet::Float(t)],
            Scheme::Stfpm,
            QuantState::Fp32,
            Normalization::default(),
            [1, 16, 16],
        )
        .unwrap();
        let x = Tensor::full(&[1, 16, 16], 0.3);
        assert!(m.anomaly_map(&x, Combine::Sum).unwrap().scores.data().iter().all(|&v| v == 0.0));
    }
}
