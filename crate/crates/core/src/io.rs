//! File formats: QPDS1 datasets, QPNN1 checkpoints, coefficient text files,
//! CSV exports and JSON sidecars carrying the config hash.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::decomposition::{DecompositionModel, Scalers, TrainRecord, TrainState};
use crate::dynamics::SnapshotDataset;
use crate::neuralnet::{AdamState, Mlp};
use crate::sparse::{format_polynomial, CoefficientBlock, PolynomialLibrary};
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 5] = b"QPDS1";
pub const CHECKPOINT_MAGIC: &[u8; 5] = b"QPNN1";

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor that reports the byte offset of any failure.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 5]) -> Result<()> {
        let got = self.take(5, "magic")?;
        if got != magic {
            self.pos = 0;
            return Err(self.fail(format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic))));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.fail("length overflow"))?, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Header counts of a QPDS1 file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetHeader {
    pub dim: u32,
    pub trajectories: u64,
    pub snapshots: u64,
    pub h: f64,
    pub seed: u64,
}

/// `QPDS1 | d:u32 | N:u64 | M:u64 | h:f64 | seed:u64 | (x0, xh) pairs as f64`.
pub fn encode_dataset(ds: &SnapshotDataset<f64>) -> Vec<u8> {
    let (n, m, seed) = match &ds.plan {
        Some(p) => (p.trajectories as u64, p.snapshots as u64, p.seed),
        None => (ds.len() as u64, 1, 0),
    };
    let mut out = Vec::with_capacity(41 + ds.len() * ds.dim() * 16);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(ds.dim() as u32).to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&m.to_le_bytes());
    out.extend_from_slice(&ds.h.to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    for (a, b) in ds.x0.rows().into_iter().zip(ds.xh.rows()) {
        put_f64s(&mut out, a.iter().chain(b.iter()).copied());
    }
    out
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<(DatasetHeader, SnapshotDataset<f64>)> {
    let mut r = Reader::new(bytes, path);
    r.magic(DATASET_MAGIC)?;
    let header = DatasetHeader {
        dim: r.u32("dimension")?,
        trajectories: r.u64("trajectory count")?,
        snapshots: r.u64("snapshot count")?,
        h: r.f64("h")?,
        seed: r.u64("seed")?,
    };
    let d = header.dim as usize;
    let pairs = header
        .trajectories
        .checked_mul(header.snapshots)
        .filter(|&p| d > 0 && p <= (bytes.len() / (16 * d)) as u64)
        .ok_or_else(|| r.fail(format!("header promises {}x{} pairs of dimension {d}, file is too short", header.trajectories, header.snapshots)))?
        as usize;
    let flat = r.f64s(pairs * 2 * d, "pairs")?;
    r.finish()?;
    let mut x0 = Array2::zeros((pairs, d));
    let mut xh = Array2::zeros((pairs, d));
    for (i, chunk) in flat.chunks_exact(2 * d).enumerate() {
        x0.row_mut(i).assign(&Array1::from(chunk[..d].to_vec()));
        xh.row_mut(i).assign(&Array1::from(chunk[d..].to_vec()));
    }
    let ds = SnapshotDataset::from_pairs(x0, xh, header.h).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        msg: e.to_string(),
    })?;
    Ok((header, ds))
}

pub fn write_dataset(path: &Path, ds: &SnapshotDataset<f64>) -> Result<()> {
    write_bytes(path, &encode_dataset(ds))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, SnapshotDataset<f64>)> {
    decode_dataset(&read_bytes(path)?, path)
}

/// CSV with columns `x0_1..x0_d, xh_1..xh_d`.
pub fn dataset_csv(ds: &SnapshotDataset<f64>) -> String {
    let d = ds.dim();
    let head: Vec<String> = (1..=d).map(|i| format!("x0_{i}")).chain((1..=d).map(|i| format!("xh_{i}"))).collect();
    let mut s = head.join(",");
    s.push('\n');
    for (a, b) in ds.x0.rows().into_iter().zip(ds.xh.rows()) {
        let row: Vec<String> = a.iter().chain(b.iter()).map(|v| format!("{v:e}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// One state per row under the given column names.
pub fn states_csv(states: ArrayView2<f64>, names: &[String]) -> String {
    let mut s = names.join(",");
    s.push('\n');
    for row in states.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn put_mlp(out: &mut Vec<u8>, net: &Mlp<f64>) {
    let sizes = net.layer_sizes();
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for s in sizes {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
    put_f64s(out, net.to_flat());
}

fn get_mlp(r: &mut Reader, what: &str) -> Result<Mlp<f64>> {
    let n = r.u32(&format!("{what} layer count"))? as usize;
    if !(2..=64).contains(&n) {
        return Err(r.fail(format!("{what}: implausible layer count {n}")));
    }
    let sizes = (0..n)
        .map(|_| r.u64(&format!("{what} layer size")).map(|s| s as usize))
        .collect::<Result<Vec<_>>>()?;
    if sizes.iter().any(|&s| s == 0 || s > 1 << 20) {
        return Err(r.fail(format!("{what}: implausible layer sizes {sizes:?}")));
    }
    let count: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let at = r.pos;
    let flat = r.f64s(count, &format!("{what} parameters"))?;
    Mlp::from_flat(&sizes, &flat).map_err(|e| Error::Format {
        path: r.path.to_path_buf(),
        offset: at as u64,
        msg: e.to_string(),
    })
}

/// `QPNN1 | V net | g net | scalers | step | optional Adam moments`.
///
/// A net is `layers:u32 | sizes:u64… | flat f64 parameters` (per layer the
/// row-major weight, then the bias). Scalers are `d:u32 | μ | σ | η_v | η_g`.
pub fn encode_checkpoint(state: &TrainState<f64>, with_optimizer: bool) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_mlp(&mut out, &state.model.v_net);
    put_mlp(&mut out, &state.model.g_net);
    let sc = state.model.scalers();
    out.extend_from_slice(&(sc.mu.len() as u32).to_le_bytes());
    put_f64s(&mut out, sc.mu.iter().chain(sc.sigma.iter()).copied());
    put_f64s(&mut out, [sc.eta_v, sc.eta_g]);
    out.extend_from_slice(&state.step.to_le_bytes());
    out.push(u8::from(with_optimizer));
    if with_optimizer {
        for adam in [&state.adam_v, &state.adam_g] {
            out.extend_from_slice(&adam.t.to_le_bytes());
            put_f64s(&mut out, adam.m.to_flat());
            put_f64s(&mut out, adam.v.to_flat());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<TrainState<f64>> {
    let mut r = Reader::new(bytes, path);
    r.magic(CHECKPOINT_MAGIC)?;
    let v_net = get_mlp(&mut r, "V net")?;
    let g_net = get_mlp(&mut r, "g net")?;
    let d = r.u32("scaler dimension")? as usize;
    if d != v_net.input_dim() {
        return Err(r.fail(format!("scaler dimension {d} does not match network input {}", v_net.input_dim())));
    }
    let mu = Array1::from(r.f64s(d, "mu")?);
    let sigma = Array1::from(r.f64s(d, "sigma")?);
    let eta_v = r.f64("eta_v")?;
    let eta_g = r.f64("eta_g")?;
    let at = r.pos;
    let model = DecompositionModel::from_parts(v_net, g_net, Scalers { mu, sigma, eta_v, eta_g }).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: at as u64,
        msg: e.to_string(),
    })?;
    let step = r.u64("step")?;
    let mut state = TrainState::new(model);
    state.step = step;
    match r.u8("optimizer flag")? {
        0 => {}
        1 => {
            let shapes = [state.model.v_net.layer_sizes(), state.model.g_net.layer_sizes()];
            let mut adams = Vec::with_capacity(2);
            for sizes in &shapes {
                let t = r.u64("adam step")?;
                let n: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
                let m = Mlp::from_flat(sizes, &r.f64s(n, "adam first moment")?)?;
                let v = Mlp::from_flat(sizes, &r.f64s(n, "adam second moment")?)?;
                adams.push(AdamState { m, v, t });
            }
            state.adam_g = adams.pop().expect("two optimizer states");
            state.adam_v = adams.pop().expect("two optimizer states");
        }
        other => return Err(r.fail(format!("optimizer flag must be 0 or 1, got {other}"))),
    }
    r.finish()?;
    Ok(state)
}

pub fn write_checkpoint(path: &Path, state: &TrainState<f64>) -> Result<()> {
    write_bytes(path, &encode_checkpoint(state, true))
}

pub fn read_checkpoint(path: &Path) -> Result<TrainState<f64>> {
    decode_checkpoint(&read_bytes(path)?, path)
}

pub fn telemetry_csv(records: &[TrainRecord]) -> String {
    let mut s = String::from("step,data_loss,orth_loss,lr,skipped,max_preactivation\n");
    for r in records {
        let _ = writeln!(s, "{},{:e},{:e},{:e},{},{:e}", r.step, r.data_loss, r.orth_loss, r.lr, r.skipped, r.max_preactivation);
    }
    s
}

/// Parses rows written by [`telemetry_csv`].
pub fn parse_telemetry(text: &str, path: &Path) -> Result<Vec<TrainRecord>> {
    let mut offset = 0u64;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let here = offset;
        offset += line.len() as u64 + 1;
        if n == 0 || line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            offset: here,
            msg: format!("telemetry line {}: {msg}", n + 1),
        };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 6 {
            return Err(bad("expected 6 columns"));
        }
        let f = |i: usize| cells[i].parse::<f64>().map_err(|_| bad("not a number"));
        out.push(TrainRecord {
            step: cells[0].parse().map_err(|_| bad("bad step"))?,
            data_loss: f(1)?,
            orth_loss: f(2)?,
            lr: f(3)?,
            skipped: cells[4].parse().map_err(|_| bad("bad skip count"))?,
            max_preactivation: f(5)?,
        });
    }
    Ok(out)
}

/// Coefficient file: a header, then one section per target (`V`, `g1..gd`,
/// `f1..fd`) with a display line and `multi-index coefficient` records for
/// the nonzero entries.
pub fn coefficients_text(lib: &PolynomialLibrary, block: &CoefficientBlock<f64>, variables: &[String], config_hash: &str) -> String {
    let d = lib.dim();
    let mut s = String::new();
    let _ = writeln!(s, "# quasipot coefficients");
    let _ = writeln!(s, "config_hash {config_hash}");
    let _ = writeln!(s, "dim {d}");
    let _ = writeln!(s, "max_degree {}", lib.max_degree());
    let _ = writeln!(s, "variables {}", variables.join(" "));
    let u = block.v().mapv(|c| 2.0 * c);
    let _ = writeln!(s, "# U = {}", format_polynomial(lib, u.view(), variables));
    let mut section = |name: String, col: usize| {
        let c = block.xi.column(col);
        let _ = writeln!(s, "\n[{name}]");
        let _ = writeln!(s, "display {}", format_polynomial(lib, c, variables));
        for (k, alpha) in lib.terms().iter().enumerate() {
            if c[k] != 0.0 {
                let idx: Vec<String> = alpha.iter().map(u32::to_string).collect();
                let _ = writeln!(s, "{} {:e}", idx.join(" "), c[k]);
            }
        }
    };
    section("V".into(), d);
    for i in 0..d {
        section(format!("g{}", i + 1), d + 1 + i);
    }
    for i in 0..d {
        section(format!("f{}", i + 1), i);
    }
    s
}

/// Everything read back from a coefficient file.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientFile {
    pub library: PolynomialLibrary,
    pub block: CoefficientBlock<f64>,
    pub variables: Vec<String>,
    pub config_hash: String,
}

pub fn parse_coefficients(text: &str, path: &Path) -> Result<CoefficientFile> {
    let mut offset = 0u64;
    let mut header: std::collections::HashMap<&str, &str> = Default::default();
    let mut lib: Option<PolynomialLibrary> = None;
    let mut xi: Option<Array2<f64>> = None;
    let mut current: Option<usize> = None;
    for line in text.lines() {
        let here = offset;
        offset += line.len() as u64 + 1;
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            offset: here,
            msg,
        };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("display ") {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            if lib.is_none() {
                let d: usize = header.get("dim").and_then(|v| v.parse().ok()).ok_or_else(|| bad("missing dim".into()))?;
                let deg: u32 = header.get("max_degree").and_then(|v| v.parse().ok()).ok_or_else(|| bad("missing max_degree".into()))?;
                if d == 0 || d > 16 || deg > 32 {
                    return Err(bad(format!("implausible library dim {d}, degree {deg}")));
                }
                let l = PolynomialLibrary::new(d, deg);
                xi = Some(Array2::zeros((l.len(), 2 * d + 1)));
                lib = Some(l);
            }
            let d = lib.as_ref().expect("library set").dim();
            let index = |prefix: char| name.strip_prefix(prefix).and_then(|i| i.parse::<usize>().ok()).filter(|&i| (1..=d).contains(&i));
            current = Some(match name {
                "V" => d,
                _ if name.starts_with('g') => d + index('g').ok_or_else(|| bad(format!("bad section {name}")))?,
                _ if name.starts_with('f') => index('f').ok_or_else(|| bad(format!("bad section {name}")))? - 1,
                _ => return Err(bad(format!("unknown section {name}"))),
            });
            continue;
        }
        match (&lib, current) {
            (None, _) => {
                let (k, v) = line.split_once(' ').ok_or_else(|| bad(format!("expected `key value`, got {line:?}")))?;
                header.insert(k, v.trim());
            }
            (Some(l), Some(col)) => {
                let parts: Vec<&str> = line.split_whitespace().collect();
                if parts.len() != l.dim() + 1 {
                    return Err(bad(format!("expected {} exponents and a coefficient", l.dim())));
                }
                let alpha = parts[..l.dim()]
                    .iter()
                    .map(|p| p.parse::<u32>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad("bad exponent".into()))?;
                let k = l.term_index(&alpha).ok_or_else(|| bad(format!("term {alpha:?} outside the library")))?;
                let c: f64 = parts[l.dim()].parse().map_err(|_| bad("bad coefficient".into()))?;
                xi.as_mut().expect("set with library")[[k, col]] = c;
            }
            (Some(_), None) => return Err(bad("record outside a section".into())),
        }
    }
    let (library, xi) = match (lib, xi) {
        (Some(l), Some(x)) => (l, x),
        _ => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset,
                msg: "no coefficient sections".into(),
            })
        }
    };
    let variables: Vec<String> = header.get("variables").map(|v| v.split_whitespace().map(String::from).collect()).unwrap_or_default();
    if variables.len() != library.dim() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("expected {} variable names", library.dim()),
        });
    }
    Ok(CoefficientFile {
        block: CoefficientBlock::new(xi, library.dim())?,
        library,
        variables,
        config_hash: header.get("config_hash").unwrap_or(&"").to_string(),
    })
}

/// Provenance written next to every artifact as `<file>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub stage: String,
    /// Hash of the whole configuration.
    pub config_hash: String,
    /// Hash of the settings this artifact depends on, including upstream stages.
    pub stage_hash: String,
    pub seed: u64,
    pub tool_version: String,
    #[serde(default)]
    pub details: serde_json::Value,
}

pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

pub fn write_meta(artifact: &Path, meta: &Meta) -> Result<()> {
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    write_bytes(&meta_path(artifact), format!("{json}\n").as_bytes())
}

pub fn read_meta(artifact: &Path) -> Result<Meta> {
    let path = meta_path(artifact);
    let text = read_text(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        offset: 0,
        msg: e.to_string(),
    })
}

/// Fails with [`Error::HashMismatch`] unless the artifact's sidecar records
/// the stage hash `expected` (or `force` is set).
pub fn check_hash(artifact: &Path, expected: &str, force: bool) -> Result<Meta> {
    let meta = read_meta(artifact)?;
    if meta.stage_hash != expected && !force {
        return Err(Error::HashMismatch {
            path: artifact.to_path_buf(),
            expected: expected.to_string(),
            found: meta.stage_hash,
        });
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::fit_scalers;
    use ndarray::array;

    fn small_state() -> TrainState<f64> {
        let ds = SnapshotDataset::from_pairs(array![[0.0, 1.0], [1.0, 0.5], [2.0, -1.0]], array![[0.1, 1.0], [1.1, 0.4], [2.0, -0.9]], 0.1).unwrap();
        let v = Mlp::glorot(&[2, 3, 1], &mut crate::rng::stream(1, 0));
        let g = Mlp::glorot(&[2, 3, 2], &mut crate::rng::stream(1, 1));
        let mut st = TrainState::new(fit_scalers(&ds, v, g).unwrap());
        st.step = 17;
        st.adam_v.t = 17;
        st.adam_g.m.layers[0].bias[1] = 0.25;
        st
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let ds = SnapshotDataset::from_pairs(array![[0.0, 1.0], [2.0, 3.0]], array![[0.5, 1.5], [2.5, 3.5]], 0.01).unwrap();
        let bytes = encode_dataset(&ds);
        assert_eq!(&bytes[..5], b"QPDS1");
        assert_eq!(bytes.len(), 41 + 2 * 4 * 8);
        let (h, back) = decode_dataset(&bytes, Path::new("d")).unwrap();
        assert_eq!((h.dim, h.trajectories, h.snapshots), (2, 2, 1));
        assert_eq!(back.x0, ds.x0);
        assert_eq!(back.xh, ds.xh);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad, Path::new("d")), Err(Error::Format { offset: 0, .. })));
        match decode_dataset(&bytes[..50], Path::new("d")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 41),
            other => panic!("{other:?}"),
        }
        assert!(dataset_csv(&ds).starts_with("x0_1,x0_2,xh_1,xh_2\n"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let st = small_state();
        let back = decode_checkpoint(&encode_checkpoint(&st, true), Path::new("c")).unwrap();
        assert_eq!(back.model, st.model);
        assert_eq!(back.adam_v, st.adam_v);
        assert_eq!(back.adam_g, st.adam_g);
        assert_eq!(back.step, 17);
        let lean = decode_checkpoint(&encode_checkpoint(&st, false), Path::new("c")).unwrap();
        assert_eq!(lean.model, st.model);
        let mut bytes = encode_checkpoint(&st, true);
        bytes.push(0);
        assert!(matches!(decode_checkpoint(&bytes, Path::new("c")), Err(Error::Format { .. })));
        assert!(decode_checkpoint(b"QPDS1", Path::new("c")).is_err());
    }

    #[test]
    fn coefficient_round_trip() {
        let m = crate::quasipotential::archetypal_exact();
        let text = coefficients_text(m.library(), m.block(), m.variables(), "abc");
        assert!(text.contains("[V]\ndisplay 0.500 x^4 - 1.000 x^2 + 0.500 y^2 + 0.500 z^2 + 0.500\n"));
        assert!(text.contains("4 0 0 5e-1\n"));
        let back = parse_coefficients(&text, Path::new("k")).unwrap();
        assert_eq!(&back.block, m.block());
        assert_eq!(back.config_hash, "abc");
        assert_eq!(back.variables, m.variables());
        let broken = text.replace("4 0 0 5e-1", "9 0 0 5e-1");
        assert!(matches!(parse_coefficients(&broken, Path::new("k")), Err(Error::Format { .. })));
    }

    #[test]
    fn telemetry_round_trip() {
        let recs = vec![TrainRecord {
            step: 0,
            data_loss: 1.5,
            orth_loss: 0.25,
            lr: 1e-3,
            skipped: 2,
            max_preactivation: 3.0,
        }];
        let text = telemetry_csv(&recs);
        assert!(text.starts_with("step,data_loss,orth_loss,lr"));
        assert_eq!(parse_telemetry(&text, Path::new("t")).unwrap(), recs);
    }

    #[test]
    fn sidecar_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let art = dir.path().join("a.bin");
        write_bytes(&art, b"x").unwrap();
        let meta = Meta {
            stage: "sample".into(),
            config_hash: "c".into(),
            stage_hash: "h1".into(),
            seed: 3,
            tool_version: "0".into(),
            details: serde_json::Value::Null,
        };
        write_meta(&art, &meta).unwrap();
        assert_eq!(check_hash(&art, "h1", false).unwrap(), meta);
        assert!(matches!(check_hash(&art, "h2", false), Err(Error::HashMismatch { .. })));
        assert!(check_hash(&art, "h2", true).is_ok());
        assert!(matches!(read_meta(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
