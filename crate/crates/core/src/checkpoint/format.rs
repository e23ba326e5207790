//! Byte layout, all integers and floats little-endian:
//!
//! ```text
//! magic        4  b"MMLF"
//! version      u32 (= 1)
//! -- metadata --
//! stage        u8
//! config_hash  u64
//! n_seeds      u32, then u64 each
//! provenance   str
//! umft_hash    u8 present flag, then str when 1
//! n_models     u32, then per model:
//!   modality u32, input u32, classes u32, encoder u8 (0 mlp, 1 tiny transformer),
//!   mlp: hidden u32, features u32 | transformer: tokens u32, width u32, ff_hidden u32
//! fusion_head  u8 (1 when the tensor table holds fusion/head.*)
//! -- tensor table --
//! n_tensors    u32, then per tensor:
//!   name str, rows u32, cols u32, dtype u8 (0 f64, 1 f32), frozen u8, payload rows*cols values
//! -- adapter table --
//! n_adapters   u32, then per adapter:
//!   base_name str, rank u32, d u32, k u32, scale f64, dtype u8,
//!   A payload rank*k values, B payload d*rank values
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8. Nothing may follow the
//! adapter table.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::nn::{Architecture, EncoderSpec, LoraAdapter, ModalityModel, Param};
use crate::training::{FusionHead, Provenance, Stage, TrainedBundle, FUSION_BIAS, FUSION_WEIGHT};

pub const MAGIC: [u8; 4] = *b"MMLF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            other => Err(Error::Corrupt(format!("unknown dtype code {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F64 => "f64",
            Dtype::F32 => "f32",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Corrupt(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn payload(&mut self, m: &Matrix, dtype: Dtype) {
        for &v in m.data() {
            match dtype {
                Dtype::F64 => self.0.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => self.0.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated at byte {} reading {what}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Corrupt(format!("{what}: flag byte {other}"))),
        }
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Corrupt(format!("{what}: invalid UTF-8")))
    }

    fn matrix(&mut self, rows: usize, cols: usize, dtype: Dtype, what: &str) -> Result<Matrix> {
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Corrupt(format!("{what}: shape {rows}x{cols} overflows")))?;
        let bytes = count
            .checked_mul(dtype.width())
            .ok_or_else(|| Error::Corrupt(format!("{what}: payload size overflows")))?;
        let raw = self.take(bytes, what)?;
        let data: Vec<f64> = match dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect(),
        };
        Matrix::from_vec(rows, cols, data)
    }
}

fn write_arch(w: &mut Writer, modality: usize, arch: &Architecture) -> Result<()> {
    w.u32(modality)?;
    w.u32(arch.input)?;
    w.u32(arch.classes)?;
    match arch.encoder {
        EncoderSpec::Mlp { hidden, features } => {
            w.u8(0);
            w.u32(hidden)?;
            w.u32(features)?;
        }
        EncoderSpec::TinyTransformer {
            tokens,
            width,
            ff_hidden,
        } => {
            w.u8(1);
            w.u32(tokens)?;
            w.u32(width)?;
            w.u32(ff_hidden)?;
        }
    }
    Ok(())
}

fn read_arch(r: &mut Reader<'_>) -> Result<(usize, Architecture)> {
    let modality = r.u32("modality id")?;
    let input = r.u32("input width")?;
    let classes = r.u32("class count")?;
    let encoder = match r.u8("encoder kind")? {
        0 => EncoderSpec::Mlp {
            hidden: r.u32("hidden width")?,
            features: r.u32("feature width")?,
        },
        1 => EncoderSpec::TinyTransformer {
            tokens: r.u32("token count")?,
            width: r.u32("model width")?,
            ff_hidden: r.u32("feed-forward width")?,
        },
        other => return Err(Error::Corrupt(format!("unknown encoder kind {other}"))),
    };
    Ok((modality, Architecture { input, classes, encoder }))
}

/// Serializes a bundle. Identical bundles give identical bytes.
pub fn encode(bundle: &TrainedBundle, dtype: Dtype) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.0.extend_from_slice(&MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());

    let p = &bundle.provenance;
    w.u8(bundle.stage.code());
    w.u64(p.config_hash);
    w.u32(p.seeds.len())?;
    for &s in &p.seeds {
        w.u64(s);
    }
    w.str(&p.note)?;
    match &bundle.umft_hash {
        Some(h) => {
            w.u8(1);
            w.str(h)?;
        }
        None => w.u8(0),
    }
    w.u32(bundle.models.len())?;
    for m in &bundle.models {
        write_arch(&mut w, m.modality(), m.architecture())?;
    }
    w.u8(u8::from(bundle.fusion_head.is_some()));

    let mut tensors: Vec<&Param> = bundle.models.iter().flat_map(|m| m.base_params()).collect();
    if let Some(h) = &bundle.fusion_head {
        tensors.extend(h.params());
    }
    w.u32(tensors.len())?;
    for t in tensors {
        w.str(&t.name)?;
        w.u32(t.value.rows())?;
        w.u32(t.value.cols())?;
        w.u8(dtype.code());
        w.u8(u8::from(t.frozen));
        w.payload(&t.value, dtype);
    }

    let adapters: Vec<&LoraAdapter> = bundle.models.iter().flat_map(|m| m.adapters()).collect();
    w.u32(adapters.len())?;
    for ad in adapters {
        let (d, k) = ad.base_shape();
        w.str(&ad.base_name)?;
        w.u32(ad.rank)?;
        w.u32(d)?;
        w.u32(k)?;
        w.f64(ad.scale);
        w.u8(dtype.code());
        w.payload(&ad.a.value, dtype);
        w.payload(&ad.b.value, dtype);
    }
    Ok(w.0)
}

/// One tensor-table row as stored, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub value: Matrix,
    pub dtype: Dtype,
    pub frozen: bool,
}

/// One adapter-table row as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterEntry {
    pub adapter: LoraAdapter,
    pub dtype: Dtype,
}

/// A checkpoint parsed without assembling models.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub version: u32,
    pub stage: Stage,
    pub provenance: Provenance,
    pub umft_hash: Option<String>,
    pub models: Vec<(usize, Architecture)>,
    pub has_fusion_head: bool,
    pub tensors: Vec<TensorEntry>,
    pub adapters: Vec<AdapterEntry>,
    /// Byte range of the tensor table, count prefix included.
    pub tensor_table: Range<usize>,
}

pub fn parse(bytes: &[u8]) -> Result<RawCheckpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let code = r.u8("stage")?;
    let stage = Stage::from_code(code).ok_or_else(|| Error::Corrupt(format!("unknown stage code {code}")))?;
    let config_hash = r.u64("config hash")?;
    let n_seeds = r.u32("seed count")?;
    let seeds = (0..n_seeds).map(|_| r.u64("seed")).collect::<Result<Vec<_>>>()?;
    let note = r.str("provenance")?;
    let umft_hash = if r.flag("umft hash flag")? {
        Some(r.str("umft hash")?)
    } else {
        None
    };
    let n_models = r.u32("model count")?;
    let models = (0..n_models).map(|_| read_arch(&mut r)).collect::<Result<Vec<_>>>()?;
    let has_fusion_head = r.flag("fusion head flag")?;

    let table_start = r.pos;
    let n_tensors = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..n_tensors {
        let name = r.str("tensor name")?;
        let rows = r.u32("tensor rows")?;
        let cols = r.u32("tensor cols")?;
        let dtype = Dtype::from_code(r.u8("tensor dtype")?)?;
        let frozen = r.flag("tensor frozen flag")?;
        let value = r.matrix(rows, cols, dtype, &format!("payload of {name}"))?;
        tensors.push(TensorEntry {
            name,
            value,
            dtype,
            frozen,
        });
    }
    let tensor_table = table_start..r.pos;

    let n_adapters = r.u32("adapter count")?;
    let mut adapters = Vec::new();
    for _ in 0..n_adapters {
        let base = r.str("adapter base name")?;
        let rank = r.u32("adapter rank")?;
        let d = r.u32("adapter d")?;
        let k = r.u32("adapter k")?;
        let scale = r.f64("adapter scale")?;
        let dtype = Dtype::from_code(r.u8("adapter dtype")?)?;
        let a = r.matrix(rank, k, dtype, &format!("A of {base}"))?;
        let b = r.matrix(d, rank, dtype, &format!("B of {base}"))?;
        let mut adapter = LoraAdapter::new(&base, d, k, a, scale).map_err(|e| Error::Corrupt(e.to_string()))?;
        adapter.b.value = b;
        adapters.push(AdapterEntry { adapter, dtype });
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(RawCheckpoint {
        version,
        stage,
        provenance: Provenance {
            config_hash,
            seeds,
            note,
        },
        umft_hash,
        models,
        has_fusion_head,
        tensors,
        adapters,
        tensor_table,
    })
}

fn owner(name: &str) -> Option<usize> {
    name.strip_prefix('m')?.split('/').next()?.parse().ok()
}

/// Rebuilds a bundle, checking every tensor against the declared architectures.
pub fn decode(bytes: &[u8]) -> Result<TrainedBundle> {
    let raw = parse(bytes)?;
    let corrupt = |e: Error| match e {
        Error::Corrupt(_) => e,
        other => Error::Corrupt(other.to_string()),
    };
    let mut params: BTreeMap<usize, Vec<Param>> = BTreeMap::new();
    let mut adapters: BTreeMap<usize, Vec<LoraAdapter>> = BTreeMap::new();
    let mut fusion: BTreeMap<String, Param> = BTreeMap::new();
    for t in raw.tensors {
        let mut p = Param::new(t.name.clone(), t.value);
        p.frozen = t.frozen;
        if t.name == FUSION_WEIGHT || t.name == FUSION_BIAS {
            fusion.insert(t.name, p);
        } else {
            let id = owner(&t.name).ok_or_else(|| Error::Corrupt(format!("tensor `{}` has no model", t.name)))?;
            params.entry(id).or_default().push(p);
        }
    }
    for a in raw.adapters {
        let id = owner(&a.adapter.base_name)
            .ok_or_else(|| Error::Corrupt(format!("adapter `{}` has no model", a.adapter.base_name)))?;
        adapters.entry(id).or_default().push(a.adapter);
    }
    let mut models = Vec::with_capacity(raw.models.len());
    for (id, arch) in raw.models {
        let ps = params.remove(&id).unwrap_or_default();
        let ads = adapters.remove(&id).unwrap_or_default();
        models.push(ModalityModel::from_parts(id, arch, ps, ads).map_err(corrupt)?);
    }
    if let Some(id) = params.keys().chain(adapters.keys()).next() {
        return Err(Error::Corrupt(format!("tensors for undeclared model m{id}")));
    }
    let fusion_head = match (raw.has_fusion_head, fusion.len()) {
        (false, 0) => None,
        (true, 2) => {
            let w = fusion.remove(FUSION_WEIGHT).expect("two fusion tensors");
            let b = fusion.remove(FUSION_BIAS).expect("two fusion tensors");
            Some(FusionHead::from_params(w, b).map_err(corrupt)?)
        }
        _ => return Err(Error::Corrupt("fusion head flag disagrees with tensor table".into())),
    };
    Ok(TrainedBundle {
        stage: raw.stage,
        models,
        fusion_head,
        provenance: raw.provenance,
        umft_hash: raw.umft_hash,
    })
}
