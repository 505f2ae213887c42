use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::experiment::{MetricsRecord, Variant};
use super::format::fmt_sig;
use crate::error::Result;
use crate::pathfinder::LayerStrategy;

/// Sparsity values of the sweep.
pub const SPARSITY_GRID: [f64; 6] = [0.01, 0.03, 0.05, 0.1, 0.2, 1.0];
const SUBSETS: [&str; 3] = ["A", "AB", "ABC"];

#[derive(Debug, Clone)]
struct RunInfo {
    variant: String,
    layers: String,
    window: String,
    p: f64,
    mining: String,
    attack_types: String,
    metrics: Vec<MetricsRecord>,
}

impl RunInfo {
    fn is_default_setting(&self) -> bool {
        self.layers == "default" && self.attack_types == "ABC" && (self.p - 0.05).abs() < 1e-12
    }

    fn split(&self, name: &str) -> Option<&MetricsRecord> {
        self.metrics.iter().find(|m| m.split == name)
    }
}

fn load_run(dir: &Path) -> Result<Option<RunInfo>> {
    let (run, metrics) = (dir.join("run.txt"), dir.join("metrics.tsv"));
    if !run.is_file() || !metrics.is_file() {
        return Ok(None);
    }
    let kv: BTreeMap<String, String> =
        fs::read_to_string(run)?.lines().filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string()))).collect();
    let get = |k: &str| kv.get(k).cloned().unwrap_or_default();
    let metrics = fs::read_to_string(metrics)?
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(MetricsRecord::parse_line)
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(RunInfo {
        variant: get("variant"),
        layers: get("layers"),
        window: get("window"),
        p: get("p").parse().unwrap_or(f64::NAN),
        mining: get("mining"),
        attack_types: get("attack_types"),
        metrics,
    }))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn or_na(xs: &[f64]) -> String {
    if xs.is_empty() {
        "NA".into()
    } else {
        fmt_sig(mean(xs))
    }
}

/// What [`report`] wrote.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub runs: usize,
    pub files: Vec<PathBuf>,
    /// Expected settings with no completed run.
    pub absent: Vec<String>,
}

/// Aggregates every run directory under `dir` into `iou.csv`, `sweep.csv`,
/// `static_dynamic.csv`, `summary.tsv` and `absent.txt`.
pub fn report(dir: &Path) -> Result<Report> {
    fs::create_dir_all(dir)?;
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    let mut runs = Vec::new();
    for d in &subdirs {
        if let Some(r) = load_run(d)? {
            runs.push(r);
        }
    }
    let mut out = Report { runs: runs.len(), ..Default::default() };
    let mut write = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body)?;
        out.files.push(path);
        Ok(())
    };

    // Path overlap before and after, per attack type.
    let jpu_default: Vec<&RunInfo> =
        runs.iter().filter(|r| r.variant == "jpu" && r.mining == "on_policy" && r.is_default_setting()).collect();
    let mut iou = String::from("attack_type,phase,layer,iou,runs\n");
    for t in ["A", "B", "C"] {
        for phase in ["base", "post"] {
            let curves: Vec<&Vec<f64>> =
                jpu_default.iter().filter_map(|r| r.split(&format!("{phase}.{t}"))).map(|m| &m.iou_curve).collect();
            let layers = curves.iter().map(|c| c.len()).max().unwrap_or(0);
            for l in 0..layers {
                let vals: Vec<f64> = curves.iter().filter_map(|c| c.get(l).copied()).collect();
                writeln!(iou, "{t},{phase},{l},{},{}", or_na(&vals), vals.len()).unwrap();
            }
        }
    }
    write("iou.csv", iou)?;

    let mut sweep = String::from("p,asr_proxy,utility_nll,runs\n");
    for p in SPARSITY_GRID {
        let hits: Vec<&RunInfo> = runs
            .iter()
            .filter(|r| {
                r.variant == "jpu" && r.mining == "on_policy" && r.layers == "default" && r.attack_types == "ABC" && (r.p - p).abs() < 1e-12
            })
            .collect();
        let asr: Vec<f64> = hits.iter().filter_map(|r| r.split("post")).map(|m| m.asr_proxy).collect();
        let util: Vec<f64> = hits.iter().filter_map(|r| r.split("post")).map(|m| m.utility_nll).collect();
        writeln!(sweep, "{},{},{},{}", fmt_sig(p), or_na(&asr), or_na(&util), asr.len()).unwrap();
    }
    write("sweep.csv", sweep)?;

    let mut sd = String::from("attack_types,mining,asr_proxy,runs\n");
    for subset in SUBSETS {
        for mining in ["static", "on_policy"] {
            let asr: Vec<f64> = runs
                .iter()
                .filter(|r| {
                    (r.variant == "jpu" || r.variant == "jp_policy")
                        && r.mining == mining
                        && r.attack_types == subset
                        && r.layers == "default"
                        && (r.p - 0.05).abs() < 1e-12
                })
                .filter_map(|r| r.split("post"))
                .map(|m| m.asr_proxy)
                .collect();
            writeln!(sd, "{subset},{mining},{},{}", or_na(&asr), asr.len()).unwrap();
        }
    }
    write("static_dynamic.csv", sd)?;

    let mut groups: BTreeMap<(String, String, String, String, String, String), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in &runs {
        if let Some(m) = r.split("post") {
            let key = (r.variant.clone(), r.layers.clone(), r.window.clone(), fmt_sig(r.p), r.mining.clone(), r.attack_types.clone());
            groups.entry(key).or_default().push(m);
        }
    }
    let mut summary = String::from(
        "variant\tlayers\twindow\tp\tmining\tattack_types\truns\tasr_mean\tasr_min\tasr_max\tfalse_refusal_mean\tutility_nll_mean\n",
    );
    for ((variant, layers, window, p, mining, types), ms) in &groups {
        let asr: Vec<f64> = ms.iter().map(|m| m.asr_proxy).collect();
        let frr: Vec<f64> = ms.iter().map(|m| m.false_refusal_rate).collect();
        let util: Vec<f64> = ms.iter().map(|m| m.utility_nll).collect();
        let min = asr.iter().copied().fold(f64::INFINITY, f64::min);
        let max = asr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        writeln!(
            summary,
            "{variant}\t{layers}\t{window}\t{p}\t{mining}\t{types}\t{}\t{}\t{}\t{}\t{}\t{}",
            ms.len(),
            fmt_sig(mean(&asr)),
            fmt_sig(min),
            fmt_sig(max),
            fmt_sig(mean(&frr)),
            fmt_sig(mean(&util))
        )
        .unwrap();
    }
    write("summary.tsv", summary)?;

    let mut absent = Vec::new();
    for v in Variant::ALL {
        if !runs.iter().any(|r| r.variant == v.name() && r.is_default_setting()) {
            absent.push(format!("variant {}", v.name()));
        }
    }
    for s in LayerStrategy::ALL {
        if !runs.iter().any(|r| r.variant == "jpu" && r.layers == s.name()) {
            absent.push(format!("layers {}", s.name()));
        }
    }
    for p in SPARSITY_GRID {
        if !runs.iter().any(|r| r.variant == "jpu" && r.layers == "default" && (r.p - p).abs() < 1e-12) {
            absent.push(format!("sparsity {}", fmt_sig(p)));
        }
    }
    for subset in SUBSETS {
        for mining in ["static", "on_policy"] {
            if !runs.iter().any(|r| r.attack_types == subset && r.mining == mining && (r.variant == "jpu" || r.variant == "jp_policy")) {
                absent.push(format!("buffer {subset} {mining}"));
            }
        }
    }
    write("absent.txt", absent.iter().map(|a| format!("{a}\n")).collect())?;
    out.absent = absent;
    Ok(out)
}
