use super::model::{BnRunning, UNetModel};
use super::spec::ModelSpec;
use crate::binio::{put_f64s, put_section, put_u32, put_u64, Cursor};
use crate::diffcore::AdamState;
use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NNTB";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Precision flag for double precision; the only one written.
pub const PRECISION_F64: u8 = 0;

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: UNetModel,
    pub adam: Option<AdamState>,
    /// Free-form JSON (training config, epoch) stored alongside the model.
    pub meta: Option<serde_json::Value>,
}

pub fn encode_checkpoint(model: &UNetModel, adam: Option<&AdamState>, meta: Option<&serde_json::Value>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.extend_from_slice(&model.spec.hash());
    put_u64(&mut out, model.seed);
    out.push(PRECISION_F64);
    put_u64(&mut out, model.param_count() as u64);

    put_section(&mut out, "spec", &model.spec.canonical_json());
    let mut params = Vec::with_capacity(model.param_count() * 8);
    for p in &model.params {
        put_f64s(&mut params, p.value.data());
    }
    put_section(&mut out, "params", &params);
    let mut bn = Vec::new();
    for b in &model.bn {
        put_u64(&mut bn, b.updates);
        put_f64s(&mut bn, &b.mean);
        put_f64s(&mut bn, &b.var);
    }
    put_section(&mut out, "bnstats", &bn);
    if let Some(a) = adam {
        let mut s = Vec::new();
        put_u64(&mut s, a.step);
        put_f64s(&mut s, &[a.beta1, a.beta2, a.eps]);
        for m in &a.m {
            put_f64s(&mut s, m);
        }
        for v in &a.v {
            put_f64s(&mut s, v);
        }
        put_section(&mut out, "adam", &s);
    }
    if let Some(m) = meta {
        put_section(&mut out, "meta", &serde_json::to_vec(m).expect("json value serialises"));
    }
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor::new(buf, "checkpoint");
    let magic: [u8; 4] = c.array()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { expected: CHECKPOINT_VERSION, found: version });
    }
    let hash: [u8; 32] = c.array()?;
    let seed = c.u64()?;
    let precision = c.u8()?;
    if precision != PRECISION_F64 {
        return Err(Error::UnsupportedFormat(format!("precision flag {precision}")));
    }
    let count = c.u64()? as usize;

    let (mut spec, mut params, mut bn, mut adam, mut meta) = (None, None, None, None, None);
    while !c.is_empty() {
        let (name, payload) = c.section()?;
        match name.as_str() {
            "spec" => spec = Some(payload),
            "params" => params = Some(payload),
            "bnstats" => bn = Some(payload),
            "adam" => adam = Some(payload),
            "meta" => meta = Some(payload),
            _ => {}
        }
    }
    let missing = |s: &str| Error::Truncated(format!("checkpoint has no `{s}` section"));
    let spec_bytes = spec.ok_or_else(|| missing("spec"))?;
    if <[u8; 32]>::from(Sha256::digest(spec_bytes)) != hash {
        return Err(Error::SpecHash);
    }
    let spec: ModelSpec = serde_json::from_slice(spec_bytes)?;
    let mut model = UNetModel::build(spec, seed)?;
    if model.param_count() != count {
        return Err(Error::Contract(format!(
            "header records {count} parameters, spec implies {}",
            model.param_count()
        )));
    }

    let mut pc = Cursor::new(params.ok_or_else(|| missing("params"))?, "params section");
    for p in &mut model.params {
        let vals = pc.f64s(p.value.len())?;
        p.value.data_mut().copy_from_slice(&vals);
    }
    let mut bc = Cursor::new(bn.ok_or_else(|| missing("bnstats"))?, "bnstats section");
    for b in &mut model.bn {
        let n = b.mean.len();
        *b = BnRunning { updates: bc.u64()?, mean: bc.f64s(n)?, var: bc.f64s(n)? };
    }
    let adam = match adam {
        None => None,
        Some(payload) => {
            let mut ac = Cursor::new(payload, "adam section");
            let step = ac.u64()?;
            let (beta1, beta2, eps) = (ac.f64()?, ac.f64()?, ac.f64()?);
            let mut a = AdamState::with_hyper(&model.params, beta1, beta2, eps);
            a.step = step;
            for m in &mut a.m {
                *m = ac.f64s(m.len())?;
            }
            for v in &mut a.v {
                *v = ac.f64s(v.len())?;
            }
            Some(a)
        }
    };
    let meta = meta.map(serde_json::from_slice).transpose()?;
    Ok(Checkpoint { model, adam, meta })
}

pub fn save_checkpoint(
    path: &Path,
    model: &UNetModel,
    adam: Option<&AdamState>,
    meta: Option<&serde_json::Value>,
) -> Result<()> {
    let bytes = encode_checkpoint(model, adam, meta);
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Hex sha256 of a checkpoint file's bytes.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a model's spec, seed, parameters and running statistics.
pub fn model_digest(model: &UNetModel) -> [u8; 32] {
    Sha256::digest(encode_checkpoint(model, None, None)).into()
}
