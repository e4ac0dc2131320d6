//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `VADECKPT`, a little-endian `u16` version, a
//! `u32` section count, then for each section a `u16` name length, the
//! UTF-8 name, a `u64` payload length and the payload. Integers and reals
//! are little-endian; reals are IEEE 64-bit. Sections: `encoder-spec`,
//! `encoder-params`, `decoder-spec`, `decoder-params`, `prior`, `meta`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::nets::{Activation, HeadKind, Linear, MlpParams, MlpSpec, ObsKind};
use crate::model::VadeModel;

use super::Standardizer;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VADECKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

const SECTIONS: [&str; 6] = ["encoder-spec", "encoder-params", "decoder-spec", "decoder-params", "prior", "meta"];

/// Everything needed to reproduce a run besides the model itself.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    /// Epochs of variational training completed.
    pub epoch: u64,
    pub seed: u64,
    /// Echo of the run configuration, free-form text.
    pub config: String,
    pub binarize: bool,
    pub standardizer: Option<Standardizer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: VadeModel,
    pub meta: CheckpointMeta,
}

#[derive(Default)]
struct Buf(Vec<u8>);

impl Buf {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rows());
        self.u32(t.cols());
        for &x in t.data() {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'a str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!("{} truncated at byte {}", self.what, self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.corrupt("invalid UTF-8"))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(self.corrupt("array length exceeds section"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let (r, c) = (self.u32()?, self.u32()?);
        if r == 0 || c == 0 || r.saturating_mul(c) > (self.bytes.len() - self.pos) / 8 {
            return Err(self.corrupt("bad tensor shape"));
        }
        let data = (0..r * c).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::matrix(r, c, data)
    }
    fn corrupt(&self, reason: &str) -> Error {
        Error::CorruptCheckpoint(format!("{}: {reason}", self.what))
    }
    fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(self.corrupt("trailing bytes"))
        }
    }
}

fn head_name(h: HeadKind) -> &'static str {
    match h {
        HeadKind::BernoulliMean => "bernoulli-mean",
        HeadKind::GaussianMeanLogVar => "gaussian-mean-logvar",
        HeadKind::EncoderMeanLogVar => "encoder-mean-logvar",
        HeadKind::Plain => "plain",
    }
}

fn head_from_name(s: &str) -> Option<HeadKind> {
    [HeadKind::BernoulliMean, HeadKind::GaussianMeanLogVar, HeadKind::EncoderMeanLogVar, HeadKind::Plain]
        .into_iter()
        .find(|&h| head_name(h) == s)
}

fn write_spec(b: &mut Buf, s: &MlpSpec) {
    b.u32(s.layer_sizes.len());
    for &n in &s.layer_sizes {
        b.u64(n as u64);
    }
    b.str(s.hidden_activation.name());
    b.str(head_name(s.head));
    b.f64(s.prob_clamp);
}

fn read_spec(r: &mut Reader) -> Result<MlpSpec> {
    let n = r.u32()?;
    if n > r.bytes.len() / 8 {
        return Err(r.corrupt("layer count exceeds section"));
    }
    let sizes = (0..n).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let act = r.str()?;
    let act = Activation::from_name(&act).ok_or_else(|| r.corrupt(&format!("unknown activation {act:?}")))?;
    let head = r.str()?;
    let head = head_from_name(&head).ok_or_else(|| r.corrupt(&format!("unknown head {head:?}")))?;
    let mut spec = MlpSpec::new(sizes, act, head);
    spec.prob_clamp = r.f64()?;
    spec.validate().map_err(|e| r.corrupt(&e.to_string()))?;
    Ok(spec)
}

fn write_params(b: &mut Buf, p: &MlpParams) {
    let t = p.tensors();
    b.u32(t.len());
    for x in t {
        b.tensor(x);
    }
}

fn read_params(r: &mut Reader, spec: MlpSpec) -> Result<MlpParams> {
    let n = r.u32()?;
    let n_trunk = spec.layer_sizes.len() - 2;
    if n != 2 * (n_trunk + spec.head.outputs()) {
        return Err(r.corrupt("tensor count does not match the network shape"));
    }
    let mut layers = Vec::with_capacity(n / 2);
    for _ in 0..n / 2 {
        layers.push(Linear {
            weight: r.tensor()?,
            bias: r.tensor()?,
        });
    }
    let heads = layers.split_off(n_trunk);
    let sizes = &spec.layer_sizes;
    for (i, l) in layers.iter().chain(&heads).enumerate() {
        let (fi, fo) = if i < n_trunk { (sizes[i], sizes[i + 1]) } else { (sizes[n_trunk], sizes[n_trunk + 1]) };
        if l.weight.shape() != [fi, fo] || l.bias.shape() != [1, fo] {
            return Err(r.corrupt(&format!("layer {i} has shape {:?}", l.weight.shape())));
        }
    }
    Ok(MlpParams {
        spec,
        trunk: layers,
        heads,
    })
}

fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let m = &ckpt.model;
    let mut sections: Vec<Buf> = (0..SECTIONS.len()).map(|_| Buf::default()).collect();
    write_spec(&mut sections[0], &m.encoder.spec);
    write_params(&mut sections[1], &m.encoder);
    write_spec(&mut sections[2], &m.decoder.spec);
    write_params(&mut sections[3], &m.decoder);
    for t in [&m.pi_logits, &m.mu, &m.log_var] {
        sections[4].tensor(t);
    }
    let meta = &mut sections[5];
    meta.str(m.obs.name());
    meta.u64(m.mc_samples as u64);
    meta.u64(ckpt.meta.epoch);
    meta.u64(ckpt.meta.seed);
    meta.str(&ckpt.meta.config);
    meta.u8(ckpt.meta.binarize as u8);
    match &ckpt.meta.standardizer {
        None => meta.u8(0),
        Some(s) => {
            meta.u8(1);
            meta.f64s(&s.mean);
            meta.f64s(&s.std);
        }
    }

    let mut out = Buf::default();
    out.0.extend(CHECKPOINT_MAGIC);
    out.0.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.u32(SECTIONS.len());
    for (name, body) in SECTIONS.iter().zip(sections) {
        out.0.extend((name.len() as u16).to_le_bytes());
        out.0.extend(name.as_bytes());
        out.u64(body.0.len() as u64);
        out.0.extend(body.0);
    }
    out.0
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, "checkpoint");
    if bytes.len() < 8 && CHECKPOINT_MAGIC.starts_with(bytes) {
        return Err(Error::CorruptCheckpoint("file truncated inside the magic".into()));
    }
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::IncompatibleCheckpoint("missing VADECKPT magic".into()));
    }
    r.take(8)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "format version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let count = r.u32()?;
    let mut found: Vec<Option<&[u8]>> = vec![None; SECTIONS.len()];
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.corrupt("section name is not UTF-8"))?;
        let len = r.u64()?;
        let body = r.take(usize::try_from(len).map_err(|_| r.corrupt("section too large"))?)?;
        if let Some(i) = SECTIONS.iter().position(|s| *s == name) {
            found[i] = Some(body);
        }
    }
    r.finish()?;
    let section = |i: usize| -> Result<Reader> {
        found[i]
            .map(|b| Reader::new(b, SECTIONS[i]))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing section {}", SECTIONS[i])))
    };

    let mut s = section(0)?;
    let enc_spec = read_spec(&mut s)?;
    s.finish()?;
    let mut s = section(1)?;
    let encoder = read_params(&mut s, enc_spec)?;
    s.finish()?;
    let mut s = section(2)?;
    let dec_spec = read_spec(&mut s)?;
    s.finish()?;
    let mut s = section(3)?;
    let decoder = read_params(&mut s, dec_spec)?;
    s.finish()?;
    let mut s = section(4)?;
    let (pi_logits, mu, log_var) = (s.tensor()?, s.tensor()?, s.tensor()?);
    s.finish()?;

    let mut s = section(5)?;
    let obs = s.str()?;
    let obs = ObsKind::from_name(&obs).ok_or_else(|| s.corrupt(&format!("unknown observation kind {obs:?}")))?;
    let mc_samples = s.u64()? as usize;
    let epoch = s.u64()?;
    let seed = s.u64()?;
    let config = s.str()?;
    let binarize = s.u8()? != 0;
    let standardizer = match s.u8()? {
        0 => None,
        _ => Some(Standardizer {
            mean: s.f64s()?,
            std: s.f64s()?,
        }),
    };
    s.finish()?;

    let model = VadeModel {
        encoder,
        decoder,
        pi_logits,
        mu,
        log_var,
        obs,
        mc_samples,
    };
    model.validate().map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let all_finite = model.tensors().iter().all(|t| t.all_finite());
    if !all_finite {
        return Err(Error::CorruptCheckpoint("non-finite parameter".into()));
    }
    Ok(Checkpoint {
        model,
        meta: CheckpointMeta {
            epoch,
            seed,
            config,
            binarize,
            standardizer,
        },
    })
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt);
    let name = path.file_name().map_or_else(|| "checkpoint".into(), |n| n.to_string_lossy().into_owned());
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
