//! Binary checkpoints with bit-exact resume.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MMOE" | version u32 | dtype u8 | step u64 | epoch u64 | cursor u64
//! config_digest [32] | mask_digest [32]
//! n_entries u64
//!   per entry: name_len u32, name, dtype u8, ndim u8, dims (ndim x u64),
//!              offset u64 (bytes, relative to the data section)
//! data_len u64 | data section
//! ```
//!
//! The directory lists model parameters in registry order followed by
//! optimizer moments as `adam_m.<param>` / `adam_v.<param>` (always f64).
//! Loads resolve entries by name and demand exact dtype and shape, so a
//! checkpoint can only be restored into a model of the identical shape.
//! The config and mask digests are compared on load to catch silently
//! drifted runs.

use crate::autograd::{Dtype, Scalar};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::optim::AdamW;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MMOE";
const VERSION: u32 = 1;

fn ferr(path: &Path, msg: impl Into<String>) -> Error {
    Error::format(path.display().to_string(), msg)
}

/// Digest slot for runs without a mask table.
pub const NO_MASK_DIGEST: [u8; 32] = [0u8; 32];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub dtype: Dtype,
    pub step: u64,
    pub epoch: u64,
    pub cursor: u64,
    pub config_digest: [u8; 32],
    pub mask_digest: [u8; 32],
}

/// One directory entry, as stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<u64>,
    pub offset: u64,
}

impl TensorEntry {
    pub fn n_elems(&self) -> u64 {
        self.shape.iter().product()
    }

    pub fn n_bytes(&self) -> u64 {
        self.n_elems() * self.dtype.width() as u64
    }
}

fn dtype_from_tag(tag: u8, path: &Path) -> Result<Dtype> {
    Dtype::from_tag(tag).ok_or_else(|| ferr(path, format!("unknown dtype tag {tag}")))
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_entry(w: &mut impl Write, e: &TensorEntry) -> Result<()> {
    put_u32(w, e.name.len() as u32)?;
    w.write_all(e.name.as_bytes())?;
    w.write_all(&[e.dtype.tag(), e.shape.len() as u8])?;
    for &d in &e.shape {
        put_u64(w, d)?;
    }
    put_u64(w, e.offset)?;
    Ok(())
}

fn get_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| ferr(path, "truncated checkpoint"))?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| ferr(path, "truncated checkpoint"))?;
    Ok(u64::from_le_bytes(b))
}

fn get_entry(r: &mut impl Read, path: &Path) -> Result<TensorEntry> {
    let name_len = get_u32(r, path)? as usize;
    if name_len > 4096 {
        return Err(ferr(path, "implausible name length"));
    }
    let mut buf = vec![0u8; name_len];
    r.read_exact(&mut buf)
        .map_err(|_| ferr(path, "truncated checkpoint"))?;
    let name =
        String::from_utf8(buf).map_err(|_| ferr(path, "tensor name is not utf-8"))?;
    let mut head = [0u8; 2];
    r.read_exact(&mut head)
        .map_err(|_| ferr(path, "truncated checkpoint"))?;
    let dtype = dtype_from_tag(head[0], path)?;
    let ndim = head[1] as usize;
    if ndim > 8 {
        return Err(ferr(path, "implausible tensor rank"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(get_u64(r, path)?);
    }
    let offset = get_u64(r, path)?;
    Ok(TensorEntry { name, dtype, shape, offset })
}

fn write_values<T: Scalar>(w: &mut impl Write, dtype: Dtype, data: &[T]) -> Result<()> {
    match dtype {
        Dtype::F32 => {
            for x in data {
                w.write_all(&(x.into_f64() as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for x in data {
                w.write_all(&x.into_f64().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn f64s_from(blob: &[u8]) -> Vec<f64> {
    blob.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Write a checkpoint for the model and optimizer state.
pub fn save<T: Scalar>(
    path: &Path,
    meta: &CheckpointMeta,
    params: &ModelParams<T>,
    opt: &AdamW,
) -> Result<()> {
    if meta.dtype != T::DTYPE {
        return Err(Error::Checkpoint(
            "meta dtype does not match parameter dtype".into(),
        ));
    }

    let mut entries: Vec<TensorEntry> = Vec::new();
    let mut offset = 0u64;
    let mut push = |name: String, dtype: Dtype, shape: Vec<u64>| {
        let e = TensorEntry { name, dtype, shape, offset };
        offset += e.n_bytes();
        entries.push(e);
    };
    params.for_each(|name, shape, _| {
        push(
            name.to_string(),
            T::DTYPE,
            shape.iter().map(|&d| d as u64).collect(),
        );
    });
    for (name, m, _) in opt.moments() {
        push(format!("adam_m.{name}"), Dtype::F64, vec![m.len() as u64]);
        push(format!("adam_v.{name}"), Dtype::F64, vec![m.len() as u64]);
    }
    let data_len = offset;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    w.write_all(&[T::DTYPE.tag()])?;
    put_u64(&mut w, meta.step)?;
    put_u64(&mut w, meta.epoch)?;
    put_u64(&mut w, meta.cursor)?;
    w.write_all(&meta.config_digest)?;
    w.write_all(&meta.mask_digest)?;
    put_u64(&mut w, entries.len() as u64)?;
    for e in &entries {
        put_entry(&mut w, e)?;
    }
    put_u64(&mut w, data_len)?;

    let mut io_err: Option<Error> = None;
    params.for_each(|_, _, data| {
        if io_err.is_none() {
            if let Err(e) = write_values(&mut w, T::DTYPE, data) {
                io_err = Some(e);
            }
        }
    });
    if let Some(e) = io_err {
        return Err(e);
    }
    for (_, m, v) in opt.moments() {
        write_values(&mut w, Dtype::F64, m)?;
        write_values(&mut w, Dtype::F64, v)?;
    }
    w.flush()?;
    Ok(())
}

/// Read only the header and tensor directory.
pub fn read_directory(path: &Path) -> Result<(CheckpointMeta, Vec<TensorEntry>)> {
    let mut r = BufReader::new(File::open(path)?);
    let meta = read_header(&mut r, path)?;
    let n_entries = get_u64(&mut r, path)?;
    if n_entries > 1 << 20 {
        return Err(ferr(path, "implausible entry count"));
    }
    let mut entries = Vec::with_capacity(n_entries as usize);
    for _ in 0..n_entries {
        entries.push(get_entry(&mut r, path)?);
    }
    Ok((meta, entries))
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<CheckpointMeta> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| ferr(path, "truncated checkpoint"))?;
    if &magic != MAGIC {
        return Err(ferr(path, "bad magic, not a checkpoint"));
    }
    let version = get_u32(r, path)?;
    if version != VERSION {
        return Err(ferr(path, format!("unsupported version {version}")));
    }
    let mut dtype_b = [0u8; 1];
    r.read_exact(&mut dtype_b)
        .map_err(|_| ferr(path, "truncated checkpoint"))?;
    let dtype = dtype_from_tag(dtype_b[0], path)?;
    let step = get_u64(r, path)?;
    let epoch = get_u64(r, path)?;
    let cursor = get_u64(r, path)?;
    let mut config_digest = [0u8; 32];
    r.read_exact(&mut config_digest)
        .map_err(|_| ferr(path, "truncated checkpoint"))?;
    let mut mask_digest = [0u8; 32];
    r.read_exact(&mut mask_digest)
        .map_err(|_| ferr(path, "truncated checkpoint"))?;
    Ok(CheckpointMeta { dtype, step, epoch, cursor, config_digest, mask_digest })
}

/// Load a checkpoint into an existing model and optimizer of the same
/// shape. Verifies the stored digests against the expected ones.
pub fn load<T: Scalar>(
    path: &Path,
    expected_config: &[u8; 32],
    expected_masks: &[u8; 32],
    params: &mut ModelParams<T>,
    opt: &mut AdamW,
) -> Result<CheckpointMeta> {
    let mut r = BufReader::new(File::open(path)?);
    let meta = read_header(&mut r, path)?;
    if meta.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype {:?} does not match requested {:?}",
            meta.dtype,
            T::DTYPE
        )));
    }
    if &meta.config_digest != expected_config {
        return Err(Error::Checkpoint(
            "config digest mismatch: checkpoint belongs to a different run config".into(),
        ));
    }
    if &meta.mask_digest != expected_masks {
        return Err(Error::Checkpoint(
            "mask digest mismatch: checkpoint belongs to different masks".into(),
        ));
    }

    let n_entries = get_u64(&mut r, path)?;
    if n_entries > 1 << 20 {
        return Err(ferr(path, "implausible entry count"));
    }
    let mut by_name: BTreeMap<String, TensorEntry> = BTreeMap::new();
    for _ in 0..n_entries {
        let e = get_entry(&mut r, path)?;
        let end = e.offset.checked_add(e.n_bytes());
        if end.is_none() {
            return Err(ferr(path, "tensor offset overflow"));
        }
        if by_name.insert(e.name.clone(), e).is_some() {
            return Err(ferr(path, "duplicate tensor name in directory"));
        }
    }
    let data_len = get_u64(&mut r, path)?;
    for e in by_name.values() {
        if e.offset + e.n_bytes() > data_len {
            return Err(ferr(path, format!("{}: data out of bounds", e.name)));
        }
    }
    let mut blob = vec![0u8; data_len as usize];
    r.read_exact(&mut blob)
        .map_err(|_| ferr(path, "truncated checkpoint"))?;

    let mut shapes: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    params.for_each(|name, shape, _| {
        shapes.insert(name.to_string(), shape.iter().map(|&d| d as u64).collect());
    });

    let mut used = 0usize;
    let mut fill_err: Option<Error> = None;
    params.for_each_mut(|name, data| {
        if fill_err.is_some() {
            return;
        }
        let res = (|| -> Result<()> {
            let e = by_name
                .get(name)
                .ok_or_else(|| ferr(path, format!("missing tensor {name}")))?;
            if e.dtype != T::DTYPE {
                return Err(ferr(path, format!("{name}: unexpected dtype")));
            }
            if e.shape != shapes[name] {
                return Err(ferr(
                    path,
                    format!("{name}: stored shape {:?}, model holds {:?}", e.shape, shapes[name]),
                ));
            }
            let bytes = &blob[e.offset as usize..(e.offset + e.n_bytes()) as usize];
            match T::DTYPE {
                Dtype::F32 => {
                    for (slot, c) in data.iter_mut().zip(bytes.chunks_exact(4)) {
                        *slot = T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64);
                    }
                }
                Dtype::F64 => {
                    for (slot, c) in data.iter_mut().zip(bytes.chunks_exact(8)) {
                        *slot = T::from_f64(f64::from_le_bytes(c.try_into().unwrap()));
                    }
                }
            }
            Ok(())
        })();
        match res {
            Ok(()) => used += 1,
            Err(e) => fill_err = Some(e),
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }

    for name in shapes.keys() {
        let (mk, vk) = (format!("adam_m.{name}"), format!("adam_v.{name}"));
        match (by_name.get(&mk), by_name.get(&vk)) {
            (Some(me), Some(ve)) => {
                if me.dtype != Dtype::F64 || ve.dtype != Dtype::F64 {
                    return Err(ferr(path, format!("{name}: moments must be f64")));
                }
                let n: u64 = shapes[name].iter().product();
                if me.n_elems() != n || ve.n_elems() != n {
                    return Err(ferr(path, format!("{name}: moment length mismatch")));
                }
                let m = f64s_from(&blob[me.offset as usize..(me.offset + me.n_bytes()) as usize]);
                let v = f64s_from(&blob[ve.offset as usize..(ve.offset + ve.n_bytes()) as usize]);
                opt.insert_moments(name.clone(), m, v);
                used += 2;
            }
            (None, None) => {}
            _ => return Err(ferr(path, format!("{name}: incomplete moment pair"))),
        }
    }
    if used != by_name.len() {
        return Err(ferr(path, "checkpoint holds tensors unknown to this model"));
    }
    opt.set_step_count(meta.step);

    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Architecture, RunConfig};
    use crate::model::{init_params, ModelDims};
    use crate::optim::GradMap;

    fn micro() -> (ModelDims, RunConfig) {
        let mut cfg = RunConfig::new(Architecture::Smoe);
        cfg.max_vocab = 11;
        cfg.d_model = 4;
        cfg.n_heads = 1;
        cfg.n_layers = 2;
        cfg.d_ff = 4;
        cfg.n_experts = 3;
        cfg.top_k = 1;
        cfg.seq_len = 3;
        cfg.validate().unwrap();
        let dims = ModelDims::from_run(&cfg, 11);
        (dims, cfg)
    }

    fn meta(cfg: &RunConfig, dtype: Dtype) -> CheckpointMeta {
        CheckpointMeta {
            dtype,
            step: 17,
            epoch: 2,
            cursor: 5,
            config_digest: cfg.digest(),
            mask_digest: NO_MASK_DIGEST,
        }
    }

    fn fake_update<T: Scalar>(params: &mut ModelParams<T>, opt: &mut AdamW, rounds: usize) {
        for s in 0..rounds {
            let mut grads = GradMap::new();
            params.for_each(|name, _, data| {
                grads.insert(
                    name.to_string(),
                    (0..data.len()).map(|i| ((i + s) as f64 * 0.37).sin()).collect(),
                );
            });
            opt.update(params, &grads, 1e-3);
        }
    }

    fn param_bits<T: Scalar>(p: &ModelParams<T>) -> Vec<u64> {
        let mut bits = Vec::new();
        p.for_each(|_, _, d| bits.extend(d.iter().map(|x| x.into_f64().to_bits())));
        bits
    }

    #[test]
    fn roundtrip_preserves_every_bit() {
        let (dims, cfg) = micro();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");

        let mut p = init_params::<f32>(&dims, 4);
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.1);
        fake_update(&mut p, &mut opt, 3);
        save(&path, &meta(&cfg, Dtype::F32), &p, &opt).unwrap();

        let mut p2 = init_params::<f32>(&dims, 999);
        let mut opt2 = AdamW::new(0.9, 0.95, 1e-8, 0.1);
        let got = load(
            &path,
            &cfg.digest(),
            &NO_MASK_DIGEST,
            &mut p2,
            &mut opt2,
        )
        .unwrap();

        assert_eq!(got, meta(&cfg, Dtype::F32));
        assert_eq!(param_bits(&p), param_bits(&p2));
        assert_eq!(opt2.step_count(), 17);
        let a: Vec<_> = opt.moments().map(|(n, m, v)| (n.to_string(), m.to_vec(), v.to_vec())).collect();
        let b: Vec<_> = opt2.moments().map(|(n, m, v)| (n.to_string(), m.to_vec(), v.to_vec())).collect();
        assert_eq!(a.len(), b.len());
        for ((na, ma, va), (nb, mb, vb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(
                ma.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                mb.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!(
                va.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                vb.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn roundtrip_f64() {
        let (dims, cfg) = micro();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut p = init_params::<f64>(&dims, 4);
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.1);
        fake_update(&mut p, &mut opt, 2);
        save(&path, &meta(&cfg, Dtype::F64), &p, &opt).unwrap();
        let mut p2 = init_params::<f64>(&dims, 5);
        let mut opt2 = AdamW::new(0.9, 0.95, 1e-8, 0.1);
        load(&path, &cfg.digest(), &NO_MASK_DIGEST, &mut p2, &mut opt2).unwrap();
        assert_eq!(param_bits(&p), param_bits(&p2));
    }

    #[test]
    fn fresh_optimizer_roundtrips_without_moments() {
        let (dims, cfg) = micro();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = init_params::<f64>(&dims, 4);
        let opt = AdamW::new(0.9, 0.95, 1e-8, 0.1);
        save(&path, &meta(&cfg, Dtype::F64), &p, &opt).unwrap();
        let mut p2 = init_params::<f64>(&dims, 5);
        let mut opt2 = AdamW::new(0.9, 0.95, 1e-8, 0.1);
        load(&path, &cfg.digest(), &NO_MASK_DIGEST, &mut p2, &mut opt2).unwrap();
        assert_eq!(param_bits(&p), param_bits(&p2));
        assert_eq!(opt2.moments().count(), 0);
    }

    #[test]
    fn directory_names_shapes_and_offsets_are_consistent() {
        let (dims, cfg) = micro();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut p = init_params::<f32>(&dims, 4);
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.1);
        fake_update(&mut p, &mut opt, 1);
        save(&path, &meta(&cfg, Dtype::F32), &p, &opt).unwrap();

        let (got_meta, entries) = read_directory(&path).unwrap();
        assert_eq!(got_meta, meta(&cfg, Dtype::F32));
        let names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
        assert!(names.contains(&"embed"));
        assert!(names.contains(&"adam_m.embed"));
        assert!(names.contains(&"adam_v.lm_head"));

        // params appear first, in registry order, with their true shapes
        let mut expected: Vec<(String, Vec<u64>)> = Vec::new();
        p.for_each(|n, s, _| {
            expected.push((n.to_string(), s.iter().map(|&d| d as u64).collect()))
        });
        for (e, (name, shape)) in entries.iter().zip(&expected) {
            assert_eq!(&e.name, name);
            assert_eq!(&e.shape, shape);
            assert_eq!(e.dtype, Dtype::F32);
        }

        // data section is a tight tiling: offsets ascend with no gaps
        let mut offset = 0u64;
        for e in &entries {
            assert_eq!(e.offset, offset, "{} should start at {offset}", e.name);
            offset += e.n_bytes();
        }
    }

    #[test]
    fn rejects_wrong_dtype_config_or_masks() {
        let (dims, cfg) = micro();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = init_params::<f32>(&dims, 4);
        let opt = AdamW::new(0.9, 0.95, 1e-8, 0.1);
        save(&path, &meta(&cfg, Dtype::F32), &p, &opt).unwrap();

        let mut p64 = init_params::<f64>(&dims, 4);
        let mut o = AdamW::new(0.9, 0.95, 1e-8, 0.1);
        assert!(matches!(
            load(&path, &cfg.digest(), &NO_MASK_DIGEST, &mut p64, &mut o),
            Err(Error::Checkpoint(_))
        ));

        let mut p32 = init_params::<f32>(&dims, 4);
        let wrong = [9u8; 32];
        assert!(load(&path, &wrong, &NO_MASK_DIGEST, &mut p32, &mut o).is_err());
        assert!(load(&path, &cfg.digest(), &wrong, &mut p32, &mut o).is_err());
    }

    #[test]
    fn rejects_corruption_and_shape_drift() {
        let (dims, cfg) = micro();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = init_params::<f32>(&dims, 4);
        let opt = AdamW::new(0.9, 0.95, 1e-8, 0.1);
        save(&path, &meta(&cfg, Dtype::F32), &p, &opt).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let mut p2 = init_params::<f32>(&dims, 4);
        let mut o = AdamW::new(0.9, 0.95, 1e-8, 0.1);
        assert!(load(&path, &cfg.digest(), &NO_MASK_DIGEST, &mut p2, &mut o).is_err());

        bytes[0] = b'M';
        bytes.truncate(bytes.len() / 2);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load(&path, &cfg.digest(), &NO_MASK_DIGEST, &mut p2, &mut o).is_err());

        // different shape: model with one more layer must refuse the file
        save(&path, &meta(&cfg, Dtype::F32), &p, &opt).unwrap();
        let mut big_cfg = cfg.clone();
        big_cfg.n_layers = 3;
        big_cfg.validate().unwrap();
        let big_dims = ModelDims::from_run(&big_cfg, 11);
        let mut pbig = init_params::<f32>(&big_dims, 4);
        assert!(load(&path, &cfg.digest(), &NO_MASK_DIGEST, &mut pbig, &mut o).is_err());
    }
}
