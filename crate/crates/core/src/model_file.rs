//! Binary model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DQKD" u16:version
//! u8:scheme u8:n_students u8:precision
//! u32 x3:input shape  f32 x2:normalization
//! u8:has_us_stats [f64 x4]
//! u32:len plan-json
//! u64:len teacher-section
//! (u64:len student-section) x n_students
//! ```
//!
//! A network section holds the layer table, the tap list and one tensor
//! record per parameter: `u8:dtype u8:ndim u32 x ndim [qparams] payload`.
//! Dtypes are 0 = f32, 1 = f16, 2 = i8 followed by
//! `f64:scale i32:zero_point u8:bits i32:qmin i32:qmax`.

use half::f16;

use crate::calib::CalibrationPlan;
use crate::distill::{DistilledModel, Normalization, QuantState, Scheme, StudentNet, UsStats};
use crate::error::{Error, Result};
use crate::eval::ModelSize;
use crate::model::{ConvSpec, Layer, ModelDef, Network};
use crate::qnet::QuantizedNetwork;
use crate::quant::{self, IntTensor, QuantParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DQKD";
pub const VERSION: u16 = 1;

const DT_F32: u8 = 0;
const DT_F16: u8 = 1;
const DT_I8: u8 = 2;

fn bad(msg: impl Into<String>) -> Error {
    Error::ModelFormat(msg.into())
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| bad(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn section(&mut self, bytes: &[u8]) {
        self.0.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        self.0.extend_from_slice(bytes);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            bad(format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.arr()?))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.arr()?) as usize)
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.arr()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn section(&mut self) -> Result<&'a [u8]> {
        let n = u64::from_le_bytes(self.arr()?);
        self.take(usize::try_from(n).map_err(|_| bad("section too large"))?)
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(bad(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Storage {
    F32,
    F16,
}

fn write_def(w: &mut Writer, def: &ModelDef) -> Result<()> {
    w.u32(def.layers.len())?;
    for l in &def.layers {
        match *l {
            Layer::Conv(c) => {
                w.u8(0);
                for v in [c.in_ch, c.out_ch, c.k, c.stride, c.pad] {
                    w.u32(v)?;
                }
                w.u8(u8::from(c.has_bias));
            }
            Layer::Relu => w.u8(1),
            Layer::MaxPool { k, stride } => {
                w.u8(2);
                w.u32(k)?;
                w.u32(stride)?;
            }
            Layer::Upsample { factor } => {
                w.u8(3);
                w.u32(factor)?;
            }
        }
    }
    w.u32(def.tap_points.len())?;
    for &t in &def.tap_points {
        w.u32(t)?;
    }
    Ok(())
}

fn read_def(r: &mut Reader) -> Result<ModelDef> {
    let n = r.u32()?;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        layers.push(match r.u8()? {
            0 => {
                let [in_ch, out_ch, k, stride, pad] = [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?];
                let has_bias = match r.u8()? {
                    0 => false,
                    1 => true,
                    b => return Err(bad(format!("bad bias flag {b}"))),
                };
                Layer::Conv(ConvSpec {
                    k,
                    stride,
                    pad,
                    in_ch,
                    out_ch,
                    has_bias,
                })
            }
            1 => Layer::Relu,
            2 => Layer::MaxPool {
                k: r.u32()?,
                stride: r.u32()?,
            },
            3 => Layer::Upsample { factor: r.u32()? },
            t => return Err(bad(format!("unknown layer tag {t}"))),
        });
    }
    let nt = r.u32()?;
    let taps = (0..nt).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    ModelDef::new(layers, taps).map_err(|e| bad(format!("layer table: {e}")))
}

fn write_shape(w: &mut Writer, dtype: u8, shape: &[usize]) -> Result<()> {
    w.u8(dtype);
    w.u8(u8::try_from(shape.len()).map_err(|_| bad("too many dimensions"))?);
    for &d in shape {
        w.u32(d)?;
    }
    Ok(())
}

fn write_float(w: &mut Writer, t: &Tensor, storage: Storage) -> Result<()> {
    match storage {
        Storage::F32 => {
            write_shape(w, DT_F32, t.shape())?;
            t.data().iter().for_each(|&v| w.f32(v));
        }
        Storage::F16 => {
            write_shape(w, DT_F16, t.shape())?;
            for (i, &v) in t.data().iter().enumerate() {
                let h = f16::from_f32(v);
                if h.to_f32() != v {
                    return Err(bad(format!("value {v} at {i} is not exactly representable in f16")));
                }
                w.0.extend_from_slice(&h.to_le_bytes());
            }
        }
    }
    Ok(())
}

fn write_int8(w: &mut Writer, t: &IntTensor) -> Result<()> {
    let qp = t.qparams();
    if qp.qmin < i32::from(i8::MIN) || qp.qmax > i32::from(i8::MAX) {
        return Err(bad(format!("range [{}, {}] cannot be stored as i8", qp.qmin, qp.qmax)));
    }
    write_shape(w, DT_I8, t.shape())?;
    w.f64(qp.scale);
    w.i32(qp.zero_point);
    w.u8(qp.bits);
    w.i32(qp.qmin);
    w.i32(qp.qmax);
    // Range checked above, so every value fits.
    w.0.extend(t.data().iter().map(|&v| v as i8 as u8));
    Ok(())
}

enum Record {
    Float(Tensor),
    Int(IntTensor),
}

fn read_record(r: &mut Reader) -> Result<Record> {
    let dtype = r.u8()?;
    let nd = r.u8()? as usize;
    let shape = (0..nd).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad("tensor too large"))?;
    let tensor = |data: Vec<f32>| Tensor::new(shape.clone(), data).map_err(|e| bad(e.to_string()));
    match dtype {
        DT_F32 => {
            let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
            tensor(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()).map(Record::Float)
        }
        DT_F16 => {
            let raw = r.take(n.checked_mul(2).ok_or_else(|| bad("tensor too large"))?)?;
            tensor(raw.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32()).collect()).map(Record::Float)
        }
        DT_I8 => {
            let qp = QuantParams::from_parts(r.f64()?, r.i32()?, r.u8()?, r.i32()?, r.i32()?)
                .map_err(|e| bad(format!("qparams: {e}")))?;
            let raw = r.take(n)?;
            let data = raw.iter().map(|&b| i32::from(b as i8)).collect();
            IntTensor::new(shape, data, qp).map(Record::Int).map_err(|e| bad(e.to_string()))
        }
        t => Err(bad(format!("unknown dtype tag {t}"))),
    }
}

fn encode_float_net(net: &Network, storage: Storage) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    write_def(&mut w, &net.def)?;
    w.u32(net.params.len())?;
    for p in &net.params {
        write_float(&mut w, p, storage)?;
    }
    Ok(w.0)
}

/// Parameter order: per conv layer, weight then optional bias.
fn encode_quant_net(q: &QuantizedNetwork) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    write_def(&mut w, &q.def)?;
    let n = q.weights.len() + q.biases.iter().flatten().count();
    w.u32(n)?;
    for (wt, b) in q.weights.iter().zip(&q.biases) {
        write_int8(&mut w, wt)?;
        if let Some(b) = b {
            write_float(&mut w, b, Storage::F32)?;
        }
    }
    Ok(w.0)
}

fn decode_net(bytes: &[u8]) -> Result<(ModelDef, Vec<Record>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let def = read_def(&mut r)?;
    let n = r.u32()?;
    let records = (0..n).map(|_| read_record(&mut r)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok((def, records))
}

fn float_net(def: ModelDef, records: Vec<Record>) -> Result<Network> {
    let params = records
        .into_iter()
        .map(|r| match r {
            Record::Float(t) => Ok(t),
            Record::Int(_) => Err(bad("integer tensor in a float network")),
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(def, params).map_err(|e| bad(e.to_string()))
}

fn quant_net(def: ModelDef, records: Vec<Record>, plan: &CalibrationPlan, k: usize) -> Result<QuantizedNetwork> {
    let quant = plan.net_quant(k, &def)?;
    let slots = def.param_slots();
    let mut it = records.into_iter().peekable();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for cq in &quant.convs {
        let (_, bias_slot) = slots[cq.layer].expect("conv slot");
        match it.next() {
            Some(Record::Int(t)) => weights.push(t),
            _ => return Err(bad(format!("student {k}: expected i8 weights for layer {}", cq.layer))),
        }
        let bias = match it.next_if(|r| matches!(r, Record::Float(_))) {
            Some(Record::Float(t)) => Some(t),
            _ => None,
        };
        biases.push(match (bias_slot, bias) {
            (Some(_), Some(b)) => Some(b),
            (None, None) => None,
            _ => return Err(bad(format!("student {k}: bias record of layer {} does not match", cq.layer))),
        });
    }
    if it.next().is_some() {
        return Err(bad(format!("student {k}: extra tensor records")));
    }
    QuantizedNetwork::new(def, weights, biases, quant).map_err(|e| bad(e.to_string()))
}

fn scheme_tag(s: Scheme) -> u8 {
    match s {
        Scheme::Stfpm => 0,
        Scheme::Rd => 1,
        Scheme::Us { .. } => 2,
    }
}

fn precision_tag(q: &QuantState) -> u8 {
    match q {
        QuantState::Fp32 => 0,
        QuantState::Fp16 => 1,
        QuantState::Ptq(_) => 2,
        QuantState::Qat(_) => 3,
    }
}

/// Encodes the model. Students are stored as f32, f16 or i8 according to
/// the quantization state; the teacher is always f32.
pub fn serialize_model(model: &DistilledModel) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.u8(scheme_tag(model.scheme));
    w.u8(u8::try_from(model.students.len()).map_err(|_| bad("too many students"))?);
    w.u8(precision_tag(&model.quant_state));
    for &d in &model.input_shape {
        w.u32(d)?;
    }
    w.f32(model.norm.mean);
    w.f32(model.norm.std);
    match model.us_stats {
        Some(s) => {
            w.u8(1);
            for v in [s.e_mean, s.e_std, s.v_mean, s.v_std] {
                w.f64(v);
            }
        }
        None => w.u8(0),
    }
    let plan = match model.quant_state.plan() {
        Some(p) => serde_json::to_vec(p)?,
        None => Vec::new(),
    };
    w.u32(plan.len())?;
    w.0.extend_from_slice(&plan);
    w.section(&encode_float_net(model.teacher(), Storage::F32)?);
    for s in &model.students {
        let bytes = match (s, &model.quant_state) {
            (StudentNet::Float(n), QuantState::Fp32) => encode_float_net(n, Storage::F32)?,
            (StudentNet::Float(n), QuantState::Fp16) => encode_float_net(n, Storage::F16)?,
            (StudentNet::Quantized(q), QuantState::Ptq(_) | QuantState::Qat(_)) => encode_quant_net(q)?,
            _ => return Err(bad("student representation does not match the quantization state")),
        };
        w.section(&bytes);
    }
    Ok(w.0)
}

fn parse(bytes: &[u8]) -> Result<(DistilledModel, u64)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| bad("file too short for magic"))? != MAGIC {
        return Err(bad("bad magic, not a DQKD model"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    let scheme_t = r.u8()?;
    let n_students = r.u8()? as usize;
    let scheme = match scheme_t {
        0 => Scheme::Stfpm,
        1 => Scheme::Rd,
        2 => Scheme::Us { n_students },
        t => return Err(bad(format!("unknown scheme tag {t}"))),
    };
    let prec = r.u8()?;
    let input_shape = [r.u32()?, r.u32()?, r.u32()?];
    let norm = Normalization {
        mean: r.f32()?,
        std: r.f32()?,
    };
    let us_stats = match r.u8()? {
        0 => None,
        1 => Some(UsStats {
            e_mean: r.f64()?,
            e_std: r.f64()?,
            v_mean: r.f64()?,
            v_std: r.f64()?,
        }),
        t => return Err(bad(format!("bad statistics flag {t}"))),
    };
    let plan_len = r.u32()?;
    let plan_bytes = r.take(plan_len)?;
    let plan = if plan_len == 0 {
        None
    } else {
        let s = std::str::from_utf8(plan_bytes).map_err(|_| bad("plan is not UTF-8"))?;
        Some(CalibrationPlan::from_json(s)?)
    };
    let quant_state = match (prec, plan) {
        (0, None) => QuantState::Fp32,
        (1, None) => QuantState::Fp16,
        (2, Some(p)) => QuantState::Ptq(p),
        (3, Some(p)) => QuantState::Qat(p),
        (t, _) => return Err(bad(format!("precision tag {t} inconsistent with plan presence"))),
    };
    let teacher_start = r.pos;
    let (tdef, trec) = decode_net(r.section()?)?;
    let teacher_bytes = (r.pos - teacher_start) as u64;
    let teacher = float_net(tdef, trec)?;
    let mut students = Vec::with_capacity(n_students);
    for k in 0..n_students {
        let (def, recs) = decode_net(r.section()?)?;
        students.push(match &quant_state {
            QuantState::Fp32 | QuantState::Fp16 => StudentNet::Float(float_net(def, recs)?),
            QuantState::Ptq(p) | QuantState::Qat(p) => StudentNet::Quantized(quant_net(def, recs, p, k)?),
        });
    }
    r.finish()?;
    let mut model = DistilledModel::new(teacher, students, scheme, quant_state, norm, input_shape)
        .map_err(|e| bad(format!("inconsistent model: {e}")))?;
    model.us_stats = us_stats;
    Ok((model, teacher_bytes))
}

/// Decodes a model. Any truncation or inconsistency is an error; no
/// partial model is returned.
pub fn deserialize_model(bytes: &[u8]) -> Result<DistilledModel> {
    parse(bytes).map(|(m, _)| m)
}

/// File length with the teacher section (including its length prefix)
/// separated from everything else.
pub fn model_size(bytes: &[u8]) -> Result<ModelSize> {
    let (_, teacher) = parse(bytes)?;
    let total = bytes.len() as u64;
    Ok(ModelSize {
        total_bytes: total,
        teacher_bytes: teacher,
        student_bytes: total - teacher,
    })
}

/// Bytes the teacher section would take with every conv weight stored as
/// symmetric i8 (biases stay f32). Used for size comparisons only; the
/// teacher itself is never quantized.
pub fn int8_teacher_section_size(model: &DistilledModel, bits: u8) -> Result<u64> {
    let t = model.teacher();
    let slots = t.def.param_slots();
    let mut w = Writer::default();
    write_def(&mut w, &t.def)?;
    w.u32(t.params.len())?;
    for l in t.def.conv_layers() {
        let (wi, bi) = slots[l].expect("conv slot");
        let qp = crate::calib::plan::weight_qparams(&t.params[wi], bits)?;
        write_int8(&mut w, &quant::quantize(&t.params[wi], &qp))?;
        if let Some(b) = bi {
            write_float(&mut w, &t.params[b], Storage::F32)?;
        }
    }
    Ok(8 + w.0.len() as u64)
}
