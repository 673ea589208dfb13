//! On-disk artifact formats: the distilled-set container, expert buffers,
//! PGM image dumps, CSV reports, atomic writes, and directory locking.

use crate::array::DiffArray;
use crate::diagnostics::{GradProbeReport, PathReport, SnrReport};
use crate::distill::{DistilledSet, ExpertBuffer, StepStats};
use crate::error::{Error, Result};
use crate::eval::{ComparisonTable, EvalResult};
use crate::models::WitnessArch;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Write a file atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "artifact".into()),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// Exclusive ownership of an output directory; released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".ld3m-lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Contract(
                format!("output directory {} is locked by another run", dir.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

// ----- distilled-set container -----

const SET_MAGIC: &[u8; 4] = b"LD3M";
const SET_VERSION: u16 = 1;
const EXPERTS_MAGIC: &[u8; 4] = b"LD3E";

/// Metadata block of a distilled-set file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SetMeta {
    pub seed: u64,
    pub mode: String,
    pub t: usize,
    pub algorithm: String,
    pub iterations: usize,
    pub ipc: usize,
    pub num_classes: usize,
    pub d_latent: usize,
    pub d_embed: usize,
    pub num_samples: usize,
    pub denoiser_calls: u64,
}

/// Serialize a distilled set: magic, version, JSON metadata, then `Z` and `c`
/// as little-endian f32 row-major and labels as little-endian u16.
pub fn encode_set(ds: &DistilledSet, meta: &SetMeta) -> Result<Vec<u8>> {
    if meta.num_samples != ds.num_samples()
        || meta.d_latent != ds.z.cols()
        || meta.d_embed != ds.c.cols()
    {
        return Err(Error::Contract("set metadata does not match payload".into()));
    }
    let meta_json = serde_json::to_vec(meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(SET_MAGIC);
    out.extend_from_slice(&SET_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    for &v in ds.z.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &v in ds.c.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &label in &ds.labels {
        out.extend_from_slice(&(label as u16).to_le_bytes());
    }
    Ok(out)
}

pub fn save_set(path: &Path, ds: &DistilledSet, meta: &SetMeta) -> Result<()> {
    atomic_write(path, &encode_set(ds, meta)?)
}

fn corrupt(msg: &str) -> Error {
    Error::Corrupt(msg.into())
}

/// Parse and validate a distilled-set file.
pub fn decode_set(bytes: &[u8]) -> Result<(DistilledSet, SetMeta)> {
    if bytes.len() < 10 || &bytes[0..4] != SET_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != SET_VERSION {
        return Err(corrupt("unsupported version"));
    }
    let meta_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let meta_end = 10 + meta_len;
    let meta_bytes = bytes.get(10..meta_end).ok_or_else(|| corrupt("truncated metadata"))?;
    let meta: SetMeta =
        serde_json::from_slice(meta_bytes).map_err(|e| corrupt(&format!("metadata: {e}")))?;

    let m = meta.num_samples;
    if meta.num_classes == 0 || meta.ipc == 0 || m != meta.num_classes * meta.ipc {
        return Err(corrupt("inconsistent sample counts"));
    }
    let z_len = m * meta.d_latent;
    let c_len = m * meta.d_embed;
    let want = meta_end + 4 * (z_len + c_len) + 2 * m;
    if bytes.len() != want {
        return Err(corrupt("payload size mismatch"));
    }
    let mut at = meta_end;
    let read_f32s = |n: usize, at: &mut usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let v = f32::from_le_bytes(bytes[*at..*at + 4].try_into().unwrap());
            out.push(v as f64);
            *at += 4;
        }
        out
    };
    let z = DiffArray::new(vec![m, meta.d_latent], read_f32s(z_len, &mut at))?;
    let c = DiffArray::new(vec![m, meta.d_embed], read_f32s(c_len, &mut at))?;
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        let v = u16::from_le_bytes([bytes[at], bytes[at + 1]]) as usize;
        if v >= meta.num_classes {
            return Err(corrupt("label out of range"));
        }
        labels.push(v);
        at += 2;
    }
    Ok((
        DistilledSet {
            z,
            c,
            labels,
            ipc: meta.ipc,
            num_classes: meta.num_classes,
        },
        meta,
    ))
}

pub fn load_set(path: &Path) -> Result<(DistilledSet, SetMeta)> {
    let bytes = std::fs::read(path)?;
    decode_set(&bytes)
}

// ----- expert buffer container -----

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExpertsMeta {
    arch: WitnessArch,
    input_dim: usize,
    num_classes: usize,
    num_experts: usize,
    epochs: usize,
    param_shapes: Vec<Vec<usize>>,
}

/// Serialize an expert buffer: magic, JSON metadata, then every snapshot's
/// parameters as little-endian f32 in (expert, epoch, param) order.
pub fn save_experts(path: &Path, buffer: &ExpertBuffer) -> Result<()> {
    let shapes: Vec<Vec<usize>> = buffer.params_at(0, 0).iter().map(|p| p.shape().to_vec()).collect();
    let meta = ExpertsMeta {
        arch: buffer.arch,
        input_dim: buffer.input_dim,
        num_classes: buffer.num_classes,
        num_experts: buffer.num_experts(),
        epochs: buffer.epochs(),
        param_shapes: shapes,
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(EXPERTS_MAGIC);
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    for expert in &buffer.snapshots {
        for epoch in expert {
            for p in epoch {
                for &v in p.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    atomic_write(path, &out)
}

pub fn load_experts(path: &Path) -> Result<ExpertBuffer> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 || &bytes[0..4] != EXPERTS_MAGIC {
        return Err(corrupt("bad experts magic"));
    }
    let meta_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let meta_end = 8 + meta_len;
    let meta: ExpertsMeta = serde_json::from_slice(
        bytes.get(8..meta_end).ok_or_else(|| corrupt("truncated experts metadata"))?,
    )
    .map_err(|e| corrupt(&format!("experts metadata: {e}")))?;

    let per_snapshot: usize = meta.param_shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let total = meta.num_experts * (meta.epochs + 1) * per_snapshot;
    if bytes.len() != meta_end + 4 * total {
        return Err(corrupt("experts payload size mismatch"));
    }
    let mut at = meta_end;
    let mut snapshots = Vec::with_capacity(meta.num_experts);
    for _ in 0..meta.num_experts {
        let mut trajectory = Vec::with_capacity(meta.epochs + 1);
        for _ in 0..=meta.epochs {
            let mut params = Vec::with_capacity(meta.param_shapes.len());
            for shape in &meta.param_shapes {
                let n: usize = shape.iter().product();
                let mut data = Vec::with_capacity(n);
                for _ in 0..n {
                    data.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64);
                    at += 4;
                }
                params.push(DiffArray::new(shape.clone(), data)?);
            }
            trajectory.push(params);
        }
        snapshots.push(trajectory);
    }
    Ok(ExpertBuffer {
        arch: meta.arch,
        input_dim: meta.input_dim,
        num_classes: meta.num_classes,
        snapshots,
    })
}

// ----- images -----

/// Binary PGM (P5), 8-bit, from pixels in `[0, 1]`.
pub fn encode_pgm(side: usize, pixels: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(
        pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn save_pgm(path: &Path, side: usize, pixels: &[f64]) -> Result<()> {
    atomic_write(path, &encode_pgm(side, pixels))
}

// ----- CSV reports -----

fn fmt(v: f64) -> String {
    format!("{v:.12e}")
}

/// Probe CSV with the fixed header `T,mode,grad_norm_Z,grad_norm_c,wall_ms`.
pub fn probe_csv(report: &GradProbeReport) -> String {
    let mut out = String::from("T,mode,grad_norm_Z,grad_norm_c,wall_ms\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            row.t_max,
            row.mode.id(),
            fmt(row.grad_norm_z),
            fmt(row.grad_norm_c),
            row.wall_ms
        ));
    }
    out
}

/// Per-step path decomposition CSV.
pub fn paths_csv(report: &PathReport) -> String {
    let mut out = String::from("t,skip_norm,chain_norm,full_norm\n");
    for row in &report.steps {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.t,
            fmt(row.skip_norm),
            fmt(row.chain_norm),
            fmt(report.full_norm)
        ));
    }
    out
}

/// Loss-curve CSV (per-iteration loss and gradient norms).
pub fn loss_csv(curve: &[StepStats]) -> String {
    let mut out = String::from("iter,loss,grad_norm_Z,grad_norm_c\n");
    for s in curve {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.iter,
            fmt(s.loss),
            fmt(s.grad_norm_z),
            fmt(s.grad_norm_c)
        ));
    }
    out
}

/// Wall-clock CSV, separated from the loss curve so that deterministic
/// artifacts stay byte-comparable across runs.
pub fn timing_csv(curve: &[StepStats]) -> String {
    let mut out = String::from("iter,wall_ms\n");
    for s in curve {
        out.push_str(&format!("{},{:.3}\n", s.iter, s.wall_ms));
    }
    out
}

/// Per-architecture evaluation summary.
pub fn eval_csv(label: &str, result: &EvalResult) -> String {
    let mut out = String::from("condition,arch,mean,std,num_seeds\n");
    push_eval_rows(&mut out, label, result);
    out
}

fn push_eval_rows(out: &mut String, label: &str, result: &EvalResult) {
    for row in &result.rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{}\n",
            label,
            row.arch.id(),
            row.mean,
            row.std,
            row.accuracies.len()
        ));
    }
}

/// Multi-condition comparison CSV.
pub fn comparison_csv(table: &ComparisonTable) -> String {
    let mut out = String::from("condition,mode,mean_over_archs,delta_vs_first,duplicate_of\n");
    for row in &table.rows {
        out.push_str(&format!(
            "{},{},{:.6},{:+.6},{}\n",
            row.label,
            row.mode.id(),
            row.result.mean_over_archs,
            row.delta_vs_first,
            row.duplicate_of.as_deref().unwrap_or("")
        ));
    }
    out
}

/// Per-architecture rows for every condition of a comparison.
pub fn comparison_detail_csv(table: &ComparisonTable) -> String {
    let mut out = String::from("condition,arch,mean,std,num_seeds\n");
    for row in &table.rows {
        push_eval_rows(&mut out, &row.label, &row.result);
    }
    out
}

/// Rolling-SNR CSV; the snr field is empty where undefined.
pub fn snr_csv(report: &SnrReport) -> String {
    let mut out = String::from("iter,grad_norm,rolling_mean,rolling_std,snr\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.index,
            fmt(row.value),
            fmt(row.mean),
            fmt(row.std),
            row.snr.map(fmt).unwrap_or_default()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::SampleMode;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn arbitrary_set(seed: u64, ipc: usize, classes: usize) -> DistilledSet {
        let mut rng = RngStream::from_seed(seed);
        let m = ipc * classes;
        DistilledSet {
            z: rng.fill_normal(&[m, 6]),
            c: rng.fill_normal(&[m, 3]),
            labels: (0..classes).flat_map(|c| std::iter::repeat(c).take(ipc)).collect(),
            ipc,
            num_classes: classes,
        }
    }

    fn meta_for(ds: &DistilledSet) -> SetMeta {
        SetMeta {
            seed: 1,
            mode: "ld3m".into(),
            t: 10,
            algorithm: "dc".into(),
            iterations: 0,
            ipc: ds.ipc,
            num_classes: ds.num_classes,
            d_latent: ds.z.cols(),
            d_embed: ds.c.cols(),
            num_samples: ds.num_samples(),
            denoiser_calls: 0,
        }
    }

    #[test]
    fn set_roundtrip_is_bit_exact_at_f32() {
        // save(load(save(x))) == save(x): the payload is stable once at
        // 32-bit precision.
        let ds = arbitrary_set(3, 2, 3);
        let meta = meta_for(&ds);
        let bytes = encode_set(&ds, &meta).unwrap();
        let (loaded, meta2) = decode_set(&bytes).unwrap();
        assert_eq!(meta, meta2);
        let bytes2 = encode_set(&loaded, &meta2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    proptest! {
        #[test]
        fn set_roundtrip_property(seed in 0u64..1000, ipc in 1usize..4, classes in 2usize..5) {
            let ds = arbitrary_set(seed, ipc, classes);
            let meta = meta_for(&ds);
            let bytes = encode_set(&ds, &meta).unwrap();
            let (loaded, _) = decode_set(&bytes).unwrap();
            let again = encode_set(&loaded, &meta).unwrap();
            prop_assert_eq!(bytes, again);
            prop_assert_eq!(&loaded.labels, &ds.labels);
        }
    }

    #[test]
    fn truncated_or_corrupted_sets_are_rejected() {
        let ds = arbitrary_set(9, 1, 4);
        let meta = meta_for(&ds);
        let bytes = encode_set(&ds, &meta).unwrap();

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_set(truncated), Err(Error::Corrupt(_))));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_set(&bad_magic), Err(Error::Corrupt(_))));

        let mut bad_version = bytes.clone();
        bad_version[4] = 99;
        assert!(matches!(decode_set(&bad_version), Err(Error::Corrupt(_))));

        let mut extended = bytes.clone();
        extended.push(0);
        assert!(matches!(decode_set(&extended), Err(Error::Corrupt(_))));
    }

    #[test]
    fn pgm_encoding_shape_and_range() {
        let pixels: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let bytes = encode_pgm(4, &pixels);
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 16);
        assert_eq!(bytes[header.len()], 0);
        assert_eq!(*bytes.last().unwrap(), 255);
        // Out-of-range inputs clamp rather than wrap.
        let clamped = encode_pgm(1, &[2.0]);
        assert_eq!(*clamped.last().unwrap(), 255);
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.txt");
        atomic_write(&path, b"first").unwrap();
        atomic_write(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
        // No temp droppings left behind.
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn dir_lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn probe_csv_header_is_pinned() {
        let report = GradProbeReport {
            seed: 0,
            rows: vec![crate::diagnostics::ProbeRow {
                t_max: 10,
                mode: SampleMode::Standard,
                grad_norm_z: 1.0,
                grad_norm_c: 0.5,
                wall_ms: 1.25,
            }],
        };
        let csv = probe_csv(&report);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "T,mode,grad_norm_Z,grad_norm_c,wall_ms");
        assert!(lines.next().unwrap().starts_with("10,standard,"));
    }

    #[test]
    fn experts_roundtrip() {
        let mut rng = RngStream::from_seed(2);
        let buffer = ExpertBuffer {
            arch: WitnessArch::MlpS,
            input_dim: 4,
            num_classes: 2,
            snapshots: vec![vec![
                vec![rng.fill_normal(&[2, 4]), rng.fill_normal(&[2])],
                vec![rng.fill_normal(&[2, 4]), rng.fill_normal(&[2])],
            ]],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("experts.bin");
        save_experts(&path, &buffer).unwrap();
        let loaded = load_experts(&path).unwrap();
        assert_eq!(loaded.num_experts(), 1);
        assert_eq!(loaded.epochs(), 1);
        // f32 round-trip stability.
        save_experts(&path, &loaded).unwrap();
        let again = load_experts(&path).unwrap();
        for (a, b) in loaded.params_at(0, 1).iter().zip(again.params_at(0, 1)) {
            assert_eq!(a, b);
        }
    }
}
