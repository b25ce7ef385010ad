//! File-backed pipeline stages. Each stage reads the outputs of earlier
//! stages from the run directory and records its own in the manifest.

use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pierce_core::features::{derive_features, read_feature_rows, read_records, write_feature_rows, write_records};
use pierce_core::graph::{read_snapshots, write_snapshots, NormStats};
use pierce_core::qc::{label_features, read_labels, write_labels, LabelRow, LabelStats, Split};
use pierce_core::synth::{generate, read_indices, write_indices, write_truth};
use pierce_eval::experiments::{ambiguous_csv, dropout_csv, forecast_map, grid_csv, grid_export};
use pierce_eval::report::{fmt_metric, Subset};
use pierce_eval::{BuildContext, Registry};
use pierce_nn::Checkpoint;

use crate::config::ExperimentConfig;
use crate::manifest::{atomic_write, Manifest};
use crate::pipeline::{self, busiest_time, station_pairs, Dataset, DatasetInfo};

pub const SNAPSHOTS: &str = "build/snapshots.jsonl";
pub const NORM: &str = "build/norm.json";
pub const DATASET: &str = "build/dataset.json";
pub const FEATURES: &str = "features/features.csv";
pub const LABELS: &str = "labels/labels.csv";
pub const INDICES: &str = "raw/indices.csv";
pub const TRUTH: &str = "raw/truth.csv";

pub struct Run {
    pub dir: PathBuf,
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub manifest: Manifest,
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> pierce_core::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

pub fn checkpoint_path(name: &str) -> String {
    format!("train/{name}.ckpt.json")
}

fn eval_file(name: &str, file: &str) -> String {
    format!("eval/{name}/{file}")
}

fn raw_file(station: &str) -> String {
    format!("raw/obs_{station}.csv")
}

impl Run {
    pub fn open(dir: &Path, cfg: ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let manifest = Manifest::load(dir)?;
        Ok(Self { dir: dir.to_path_buf(), hash: cfg.hash(), cfg, manifest })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        atomic_write(&self.path(rel), bytes)
    }

    fn read_text(&self, rel: &str) -> Result<String> {
        std::fs::read_to_string(self.path(rel)).with_context(|| format!("reading {rel}"))
    }

    fn record(&mut self, stage: &str, inputs: &[String], outputs: &[String]) -> Result<()> {
        let hash = self.hash.clone();
        self.manifest.record(&self.dir, stage, &hash, inputs, outputs)
    }

    fn upstream(&self, stage: &str, needed_by: &str) -> Result<Vec<String>> {
        let rec = self.manifest.require(&self.dir, stage, needed_by)?;
        if rec.config_hash != self.hash {
            bail!("stage `{needed_by}`: stage `{stage}` ran with a different configuration; rerun `{stage}` first");
        }
        Ok(rec.outputs.keys().cloned().collect())
    }

    pub fn generate(&mut self) -> Result<()> {
        let g = generate(&self.cfg.scenario)?;
        let mut outputs = Vec::new();
        for (station, recs) in &g.records {
            let rel = raw_file(station);
            self.write(&rel, &csv_bytes(|b| write_records(b, recs))?)?;
            outputs.push(rel);
        }
        self.write(TRUTH, &csv_bytes(|b| write_truth(b, &g.truth))?)?;
        self.write(INDICES, &csv_bytes(|b| write_indices(b, &g.indices))?)?;
        outputs.extend([TRUTH.to_string(), INDICES.to_string()]);
        self.record("generate", &[], &outputs)
    }

    pub fn preprocess(&mut self) -> Result<()> {
        let raw: Vec<String> = self.upstream("generate", "preprocess")?.into_iter().filter(|f| f.starts_with("raw/obs_")).collect();
        let mut records = Vec::new();
        for f in &raw {
            let file = std::fs::File::open(self.path(f)).with_context(|| format!("opening {f}"))?;
            records.extend(read_records(BufReader::new(file))?);
        }
        let rows = derive_features(&records, &self.cfg.features)?;
        self.write(FEATURES, &csv_bytes(|b| write_feature_rows(b, &rows))?)?;
        self.record("preprocess", &raw, &[FEATURES.into()])
    }

    fn features(&self) -> Result<Vec<pierce_core::features::FeatureRow>> {
        let f = std::fs::File::open(self.path(FEATURES)).context("opening features")?;
        Ok(read_feature_rows(BufReader::new(f))?)
    }

    fn labels(&self) -> Result<Vec<LabelRow>> {
        let f = std::fs::File::open(self.path(LABELS)).context("opening labels")?;
        Ok(read_labels(BufReader::new(f))?)
    }

    pub fn label(&mut self) -> Result<()> {
        self.upstream("preprocess", "label")?;
        let rows = self.features()?;
        let labels = label_features(&rows, &station_pairs(&self.cfg.scenario), &self.cfg.qc);
        self.write(LABELS, &csv_bytes(|b| write_labels(b, &labels))?)?;
        let (first, last) = pipeline::time_range(&self.cfg.scenario);
        let splits = pierce_core::qc::split_and_filter(first, last, &labels, &self.cfg.split)?;
        let mut csv = String::from("scope,timesteps,nodes,confirmed,quiet,unverified,invalid,event_rate\n");
        let mut text = String::new();
        let mut emit = |scope: &str, s: LabelStats| {
            let _ = writeln!(
                csv,
                "{scope},{},{},{},{},{},{},{:.6}",
                s.timesteps, s.nodes, s.confirmed, s.quiet, s.unverified, s.invalid, s.event_rate()
            );
            let _ = writeln!(
                text,
                "{scope:<6} timesteps {:>6}  nodes {:>8}  confirmed {:>7}  quiet {:>8}  unverified {:>6}  invalid {:>6}  event rate {:.4}",
                s.timesteps, s.nodes, s.confirmed, s.quiet, s.unverified, s.invalid, s.event_rate()
            );
        };
        emit("all", LabelStats::from_rows(&labels));
        for sp in Split::ALL {
            let r = splits.get(sp);
            emit(sp.name(), LabelStats::from_rows(labels.iter().filter(|l| r.contains(l.t_s))));
        }
        self.write("labels/label_stats.csv", csv.as_bytes())?;
        self.write("labels/label_stats.txt", text.as_bytes())?;
        self.record(
            "label",
            &[FEATURES.into()],
            &[LABELS.into(), "labels/label_stats.csv".into(), "labels/label_stats.txt".into()],
        )
    }

    pub fn build(&mut self) -> Result<()> {
        self.upstream("label", "build")?;
        self.upstream("generate", "build")?;
        let rows = self.features()?;
        let labels = self.labels()?;
        let f = std::fs::File::open(self.path(INDICES)).context("opening indices")?;
        let indices = read_indices(BufReader::new(f))?;
        let ds = pipeline::build_dataset(&self.cfg, &rows, &labels, &indices)?;
        self.write(SNAPSHOTS, &csv_bytes(|b| write_snapshots(b, &ds.snaps))?)?;
        self.write(NORM, serde_json::to_string_pretty(&*ds.norm)?.as_bytes())?;
        self.write(DATASET, serde_json::to_string_pretty(&ds.info)?.as_bytes())?;
        self.record(
            "build",
            &[FEATURES.into(), LABELS.into(), INDICES.into()],
            &[SNAPSHOTS.into(), NORM.into(), DATASET.into()],
        )
    }

    pub fn dataset(&self, needed_by: &str) -> Result<Dataset> {
        self.upstream("build", needed_by)?;
        let f = std::fs::File::open(self.path(SNAPSHOTS)).context("opening snapshots")?;
        let snaps = read_snapshots(BufReader::new(f))?;
        let norm: NormStats = serde_json::from_str(&self.read_text(NORM)?)?;
        let info: DatasetInfo = serde_json::from_str(&self.read_text(DATASET)?)?;
        Ok(Dataset { snaps: snaps.into(), norm: norm.into(), info })
    }

    pub fn train(&mut self, name: &str) -> Result<()> {
        let registry = Registry::default();
        let Some(variant) = registry.variant(name)? else {
            eprintln!("{name} has no trainable parameters; nothing to train");
            return Ok(());
        };
        let ds = self.dataset("train")?;
        let mut log = String::from("epoch,train_loss,lr,val_bss,seconds\n");
        let out = pipeline::train_variant(&self.cfg, &ds, variant, &mut |e| {
            eprintln!(
                "[{name}] epoch {:>2}  loss {:.5}  val bss {}  ({:.0} s)",
                e.epoch,
                e.train_loss,
                fmt_metric(e.val_bss),
                e.seconds
            );
            let _ = writeln!(log, "{},{:.8},{:.8},{},{:.1}", e.epoch, e.train_loss, e.lr, fmt_metric(e.val_bss), e.seconds);
        })?;
        let ck = Checkpoint::from_model(&out.model, Some(out.optimizer), out.best_epoch, out.best_val_bss);
        let mut bytes = Vec::new();
        ck.write(&mut bytes)?;
        let ck_path = checkpoint_path(name);
        self.write(&ck_path, &bytes)?;
        let log_path = format!("train/{name}.log.csv");
        self.write(&log_path, log.as_bytes())?;
        self.record(&format!("train:{name}"), &[SNAPSHOTS.into(), NORM.into(), DATASET.into()], &[ck_path, log_path])
    }

    /// Scores `name` on the test split. Learned forecasters read
    /// `checkpoint`, defaulting to the one written by `train`.
    pub fn evaluate(&mut self, name: &str, checkpoint: Option<&Path>, subset: Option<Subset>, dropout: bool) -> Result<String> {
        let registry = Registry::default();
        let variant = registry.variant(name)?;
        let ds = self.dataset("evaluate")?;
        let mut inputs: Vec<String> = vec![SNAPSHOTS.into(), NORM.into(), DATASET.into()];
        let ck = match variant {
            None => None,
            Some(_) => {
                let path = match checkpoint {
                    Some(p) => p.to_path_buf(),
                    None => {
                        self.upstream(&format!("train:{name}"), "evaluate")?;
                        inputs.push(checkpoint_path(name));
                        self.path(&checkpoint_path(name))
                    }
                };
                let f = std::fs::File::open(&path).with_context(|| format!("opening checkpoint {}", path.display()))?;
                Some(Checkpoint::read(BufReader::new(f))?)
            }
        };
        let f = registry.build(name, &BuildContext { checkpoint: ck.as_ref(), climatology: ds.info.climatology })?;
        let ev = pipeline::evaluate(&self.cfg, &ds, f.as_ref(), dropout)?;
        let mut outputs = Vec::new();
        let mut put = |run: &Self, file: &str, text: String| -> Result<()> {
            let rel = eval_file(name, file);
            run.write(&rel, text.as_bytes())?;
            outputs.push(rel);
            Ok(())
        };
        put(self, "metrics.txt", ev.report.to_text())?;
        put(self, "subsets.csv", ev.report.subsets_csv())?;
        put(self, "lead.csv", ev.report.lead_csv())?;
        put(self, "ambiguous.csv", ambiguous_csv(std::slice::from_ref(&ev.ambiguous)))?;
        if let Some(rows) = &ev.dropout {
            put(self, "dropout.csv", dropout_csv(name, rows))?;
        }
        let lead = self.cfg.eval.map_lead.clamp(1, self.cfg.window.t_out);
        if let Some(t) = busiest_time(&ev.points, lead) {
            let test = ds.windows(&self.cfg, Split::Test);
            let pts = forecast_map(&ev.points, &test, t, lead);
            let cells = grid_export(&pts, self.cfg.eval.map_resolution_deg, self.cfg.eval.map_sigma_deg, 2.0);
            put(self, "map.csv", format!("# valid_time_s {} lead {lead}\n{}", t.0, grid_csv(&cells)))?;
        }
        self.record(&format!("evaluate:{name}"), &inputs, &outputs)?;
        let summary = match subset {
            Some(s) => {
                let m = ev.report.subset(s);
                format!(
                    "{name} [{}] bss {} roc_auc {} pr_auc {} pod {} far {} csi {}",
                    s.name(),
                    fmt_metric(m.bss),
                    fmt_metric(m.roc_auc),
                    fmt_metric(m.pr_auc),
                    fmt_metric(m.pod),
                    fmt_metric(m.far),
                    fmt_metric(m.csi)
                )
            }
            None => ev.report.to_text(),
        };
        Ok(summary)
    }

    /// Comparison table, lead curves, dropout and ambiguous-label tables
    /// across every configured forecaster.
    pub fn report(&mut self) -> Result<String> {
        let names = self.cfg.eval.forecasters.clone();
        let mut inputs = Vec::new();
        for n in &names {
            let stage = format!("evaluate:{n}");
            let outs = self.upstream(&stage, "report")?;
            self.manifest.verify(&self.dir, &stage, &self.hash)?;
            inputs.extend(outs);
        }
        let mut table = String::from("forecaster,subset,bss,roc_auc,pr_auc,pod,far,csi\n");
        let mut text = format!("{:<18} {:<8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n", "forecaster", "subset", "bss", "roc_auc", "pr_auc", "pod", "far", "csi");
        let mut leads = String::new();
        let mut dropout = String::new();
        let mut ambiguous = String::new();
        for n in &names {
            let subsets = self.read_text(&eval_file(n, "subsets.csv"))?;
            for line in subsets.lines().skip(1) {
                let f: Vec<&str> = line.split(',').collect();
                // forecaster,subset,n,events,bss,brier,roc_auc,pr_auc,pod,far,csi
                if f.len() != 11 || !(f[1] == "all" || f[1] == "new") {
                    continue;
                }
                let cols = [f[4], f[6], f[7], f[8], f[9], f[10]];
                let _ = writeln!(table, "{},{},{}", f[0], f[1], cols.join(","));
                let _ = writeln!(
                    text,
                    "{:<18} {:<8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
                    f[0],
                    f[1],
                    short(cols[0]),
                    short(cols[1]),
                    short(cols[2]),
                    short(cols[3]),
                    short(cols[4]),
                    short(cols[5])
                );
            }
            append_csv(&mut leads, &self.read_text(&eval_file(n, "lead.csv"))?);
            append_csv(&mut ambiguous, &self.read_text(&eval_file(n, "ambiguous.csv"))?);
            let d = self.path(&eval_file(n, "dropout.csv"));
            if d.exists() {
                append_csv(&mut dropout, &std::fs::read_to_string(d)?);
            }
        }
        let mut outputs = vec!["report/table.csv".to_string(), "report/table.txt".into(), "report/lead_curves.csv".into(), "report/ambiguous.csv".into()];
        self.write("report/table.csv", table.as_bytes())?;
        self.write("report/table.txt", text.as_bytes())?;
        self.write("report/lead_curves.csv", leads.as_bytes())?;
        self.write("report/ambiguous.csv", ambiguous.as_bytes())?;
        if !dropout.is_empty() {
            self.write("report/dropout.csv", dropout.as_bytes())?;
            outputs.push("report/dropout.csv".into());
        }
        self.record("report", &inputs, &outputs)?;
        Ok(text)
    }

    /// Every stage in order, training and evaluating each configured
    /// forecaster.
    pub fn run_all(&mut self) -> Result<String> {
        self.generate()?;
        self.preprocess()?;
        self.label()?;
        self.build()?;
        for n in self.cfg.eval.forecasters.clone() {
            self.train(&n)?;
            let dropout = n == "full";
            self.evaluate(&n, None, None, dropout)?;
        }
        self.report()
    }
}

fn short(v: &str) -> String {
    match v.parse::<f64>() {
        Ok(x) => format!("{x:.3}"),
        Err(_) => "--".into(),
    }
}

/// Appends CSV text, keeping the header only once.
fn append_csv(dst: &mut String, src: &str) {
    if dst.is_empty() {
        dst.push_str(src);
    } else {
        for line in src.lines().skip(1) {
            dst.push_str(line);
            dst.push('\n');
        }
    }
}
