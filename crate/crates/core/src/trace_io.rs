//! On-disk trace format.
//!
//! A trace is a directory:
//!
//! | file          | columns                                          |
//! |---------------|--------------------------------------------------|
//! | `meta.toml`   | format tag, scalar type, the run's `RegimeSpec`  |
//! | `samples.csv` | `t, k_max, theta, burnt, phi, max_cluster, flow` |
//! | `dist.csv`    | `t, k, v` for every nonzero `v_k`                |
//! | `flow_q.csv`  | `t, k, l, q` (exact integer counters)            |
//! | `flow_r.csv`  | `t, k, r`                                        |
//!
//! Floats are written with 17 significant digits so that reading a trace back
//! reproduces it bit for bit. Every file is written to a temporary sibling and
//! renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EvolutionTrace, FlowRecord, RegimeSpec, Sample, SizeDistribution};
use crate::scalar::Scalar;
use crate::smol::PhiSeries;

/// Version tag carried by every trace; readers reject anything else.
pub const FORMAT_VERSION: &str = "ffrg-trace/1";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format: String,
    scalar: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    threads: Option<usize>,
    spec: RegimeSpec,
}

/// Formats a float with 17 significant digits.
pub fn fmt_float<S: Scalar>(x: S) -> String {
    format!("{:.16e}", x)
}

fn parse_float<S: Scalar>(s: &str, what: &str) -> Result<S> {
    s.trim().parse::<S>().map_err(|_| Error::Format(format!("bad {what} value {s:?}")))
}

fn parse_int<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim().parse::<T>().map_err(|_| Error::Format(format!("bad {what} value {s:?}")))
}

/// Writes `contents` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let file = fs::File::open(path).map_err(|e| with_path(e, path))?;
    let mut r = csv::Reader::from_reader(std::io::BufReader::new(file));
    let found: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    if found != header {
        return Err(Error::Format(format!("{}: expected columns {header:?}, found {found:?}", path.display())));
    }
    r.records().map(|rec| rec.map_err(csv_err)).collect()
}

fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn scalar_name<S: Scalar>() -> &'static str {
    if std::mem::size_of::<S>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

/// Writes `trace` into directory `dir`, creating it if needed.
pub fn write_trace<S: Scalar>(dir: &Path, trace: &EvolutionTrace<S>) -> Result<()> {
    write_trace_with_threads(dir, trace, None)
}

/// Like [`write_trace`], also recording the worker count used to produce it.
pub fn write_trace_with_threads<S: Scalar>(dir: &Path, trace: &EvolutionTrace<S>, threads: Option<usize>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = Meta { format: FORMAT_VERSION.into(), scalar: scalar_name::<S>().into(), threads, spec: trace.spec.clone() };
    let meta = toml::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&dir.join("meta.toml"), meta.as_bytes())?;

    let samples = trace.samples();
    let rows = samples.iter().map(|s| {
        vec![
            fmt_float(s.t),
            s.dist.truncation().to_string(),
            fmt_float(s.dist.theta()),
            fmt_float(s.burnt),
            s.phi.map(fmt_float).unwrap_or_default(),
            fmt_float(s.max_cluster),
            u8::from(s.flow.is_some()).to_string(),
        ]
    });
    let header = ["t", "k_max", "theta", "burnt", "phi", "max_cluster", "flow"];
    write_atomic(&dir.join("samples.csv"), &csv_bytes(&header, rows)?)?;

    let rows = samples.iter().flat_map(|s| {
        let t = fmt_float(s.t);
        s.dist
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_zero())
            .map(move |(i, &v)| vec![t.clone(), (i + 1).to_string(), fmt_float(v)])
    });
    write_atomic(&dir.join("dist.csv"), &csv_bytes(&["t", "k", "v"], rows)?)?;

    let with_flow = || samples.iter().filter_map(|s| s.flow.as_ref().map(|f| (fmt_float(s.t), f)));
    let rows = with_flow().flat_map(|(t, f)| {
        f.q_entries().map(move |(k, l, q)| vec![t.clone(), k.to_string(), l.to_string(), q.to_string()])
    });
    write_atomic(&dir.join("flow_q.csv"), &csv_bytes(&["t", "k", "l", "q"], rows)?)?;
    let rows = with_flow().flat_map(|(t, f)| f.r_entries().map(move |(k, r)| vec![t.clone(), k.to_string(), r.to_string()]));
    write_atomic(&dir.join("flow_r.csv"), &csv_bytes(&["t", "k", "r"], rows)?)?;
    Ok(())
}

/// Reads a trace directory written by [`write_trace`].
pub fn read_trace<S: Scalar>(dir: &Path) -> Result<EvolutionTrace<S>> {
    let meta_path = dir.join("meta.toml");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| with_path(e, &meta_path))?;
    let raw: toml::Table = meta_text.parse().map_err(|e: toml::de::Error| Error::Format(e.to_string()))?;
    let found = raw.get("format").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if found != FORMAT_VERSION {
        return Err(Error::Version { found: found.to_owned(), expected: FORMAT_VERSION });
    }
    let meta: Meta = toml::from_str(&meta_text).map_err(|e| Error::Format(e.to_string()))?;

    struct Row<S> {
        t: S,
        k_max: usize,
        theta: S,
        burnt: S,
        phi: Option<S>,
        max_cluster: S,
        flow: bool,
    }
    let header = ["t", "k_max", "theta", "burnt", "phi", "max_cluster", "flow"];
    let rows = read_csv(&dir.join("samples.csv"), &header)?
        .iter()
        .map(|r| {
            Ok(Row {
                t: parse_float(&r[0], "t")?,
                k_max: parse_int(&r[1], "k_max")?,
                theta: parse_float(&r[2], "theta")?,
                burnt: parse_float(&r[3], "burnt")?,
                phi: if r[4].is_empty() { None } else { Some(parse_float(&r[4], "phi")?) },
                max_cluster: parse_float(&r[5], "max_cluster")?,
                flow: &r[6] == "1",
            })
        })
        .collect::<Result<Vec<Row<S>>>>()?;

    let index_of = |t: &str| -> Result<usize> {
        let t: S = parse_float(t, "t")?;
        rows.iter().position(|r| r.t == t).ok_or_else(|| Error::Format(format!("t = {t} has no sample row")))
    };
    let mut dists: Vec<Vec<S>> = rows.iter().map(|r| vec![S::zero(); r.k_max]).collect();
    let mut cursor = 0usize;
    let mut last_t = String::new();
    for r in read_csv(&dir.join("dist.csv"), &["t", "k", "v"])? {
        if r[0] != last_t {
            cursor = index_of(&r[0])?;
            last_t = r[0].to_owned();
        }
        let k: usize = parse_int(&r[1], "k")?;
        let slot = dists[cursor]
            .get_mut(k.wrapping_sub(1))
            .ok_or_else(|| Error::Format(format!("k = {k} outside the sample's truncation")))?;
        *slot = parse_float(&r[2], "v")?;
    }

    let mut flows: Vec<Option<FlowRecord>> = rows.iter().map(|r| r.flow.then(FlowRecord::new)).collect();
    fn flow_at(flows: &mut [Option<FlowRecord>], i: usize) -> Result<&mut FlowRecord> {
        flows[i].as_mut().ok_or_else(|| Error::Format(format!("flow rows for sample {i}, which has no flow")))
    }
    for r in read_csv(&dir.join("flow_q.csv"), &["t", "k", "l", "q"])? {
        let (k, l, q) = (parse_int(&r[1], "k")?, parse_int(&r[2], "l")?, parse_int(&r[3], "q")?);
        flow_at(&mut flows, index_of(&r[0])?)?.set_q(k, l, q);
    }
    for r in read_csv(&dir.join("flow_r.csv"), &["t", "k", "r"])? {
        let (k, value) = (parse_int(&r[1], "k")?, parse_int(&r[2], "r")?);
        flow_at(&mut flows, index_of(&r[0])?)?.set_r(k, value);
    }

    let mut trace = EvolutionTrace::new(meta.spec);
    for ((row, v), flow) in rows.into_iter().zip(dists).zip(flows) {
        trace.push(Sample {
            t: row.t,
            dist: SizeDistribution::new(v, row.theta)?,
            flow,
            burnt: row.burnt,
            phi: row.phi,
            max_cluster: row.max_cluster,
        })?;
    }
    Ok(trace)
}

/// Reads an initial distribution from a two-column `k, v` table. Missing sizes
/// are zero; the truncation is the largest listed `k` and the gel takes the
/// remaining mass.
pub fn read_distribution<S: Scalar>(path: &Path) -> Result<SizeDistribution<S>> {
    let mut v: Vec<S> = Vec::new();
    for r in read_csv(path, &["k", "v"])? {
        let k: usize = parse_int(&r[0], "k")?;
        if k == 0 {
            return Err(Error::Format("k = 0 in a size table".into()));
        }
        if v.len() < k {
            v.resize(k, S::zero());
        }
        v[k - 1] = parse_float(&r[1], "v")?;
    }
    if v.is_empty() {
        return Err(Error::Format(format!("{}: no rows", path.display())));
    }
    SizeDistribution::with_gel(v)
}

/// Writes the two burning-flux estimators side by side: `t, phi_flux, phi_tailfit`.
pub fn write_phi_table<S: Scalar>(path: &Path, flux: &PhiSeries<S>, tail: &PhiSeries<S>) -> Result<()> {
    if flux.times != tail.times {
        return Err(Error::Format("flux and tail-fit series use different times".into()));
    }
    let rows = flux
        .times
        .iter()
        .zip(flux.values.iter().zip(&tail.values))
        .map(|(&t, (&a, &b))| vec![fmt_float(t), fmt_float(a), fmt_float(b)]);
    write_atomic(path, &csv_bytes(&["t", "phi_flux", "phi_tailfit"], rows)?)
}

/// Writes an arbitrary table with a header, through a temporary file.
pub fn write_table(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    write_atomic(path, &csv_bytes(header, rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcsim::simulate;
    use crate::model::{LambdaRule, Regime};
    use crate::smol::{integrate, SolverOptions};

    #[test]
    fn seeds_above_i64_survive() {
        let spec = RegimeSpec::finite_n(20, LambdaRule::Fixed(0.0), 0.5, 0.5, u64::MAX - 3);
        let trace = simulate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_trace(dir.path(), &trace).unwrap();
        assert_eq!(read_trace::<f64>(dir.path()).unwrap().spec.seed, u64::MAX - 3);
    }

    #[test]
    fn size_table_fills_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("init.csv");
        fs::write(&p, "k,v\n1,0.5\n3,0.25\n").unwrap();
        let d = read_distribution::<f64>(&p).unwrap();
        assert_eq!(d.as_slice(), &[0.5, 0.0, 0.25]);
        assert!((d.theta() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn finite_n_round_trip() {
        let spec = RegimeSpec::finite_n(500, LambdaRule::Exponent(0.5), 3.0, 0.5, 9);
        let trace = simulate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_trace(dir.path(), &trace).unwrap();
        assert_eq!(read_trace::<f64>(dir.path()).unwrap(), trace);
    }

    #[test]
    fn ode_round_trip_keeps_bits() {
        let spec = RegimeSpec::ode(Regime::RegimeIV, 40, 1.0, 0.01, 0.25).with_lambda(0.7);
        let trace = integrate(&spec, &SizeDistribution::<f64>::monodisperse(40), SolverOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_trace(dir.path(), &trace).unwrap();
        let back = read_trace::<f64>(dir.path()).unwrap();
        assert_eq!(back, trace);
        let again = tempfile::tempdir().unwrap();
        write_trace(again.path(), &back).unwrap();
        for f in ["meta.toml", "samples.csv", "dist.csv"] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap());
        }
    }

    #[test]
    fn single_precision_round_trip() {
        let spec = RegimeSpec::ode(Regime::PureSmoluchowski, 16, 0.5, 0.05, 0.25);
        let trace = integrate(&spec, &SizeDistribution::<f32>::monodisperse(16), SolverOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_trace(dir.path(), &trace).unwrap();
        assert_eq!(read_trace::<f32>(dir.path()).unwrap(), trace);
    }

    #[test]
    fn unknown_version_is_rejected() {
        let spec = RegimeSpec::finite_n(20, LambdaRule::Fixed(0.1), 0.0, 1.0, 1);
        let dir = tempfile::tempdir().unwrap();
        write_trace(dir.path(), &simulate(&spec).unwrap()).unwrap();
        let meta = dir.path().join("meta.toml");
        let text = fs::read_to_string(&meta).unwrap().replace(FORMAT_VERSION, "ffrg-trace/99");
        fs::write(&meta, text).unwrap();
        assert!(matches!(read_trace::<f64>(dir.path()), Err(Error::Version { .. })));
    }

    #[test]
    fn missing_directory_is_io_error() {
        let err = read_trace::<f64>(Path::new("/nonexistent/trace")).unwrap_err();
        assert_eq!(err.class(), crate::error::ErrorClass::Io);
    }
}
