//! The commands of the lab, each writing its outputs and one ledger entry.

use std::fs;
use std::path::PathBuf;

use crate::data::Domain;
use crate::error::{Error, Result};
use crate::experiments::ablate::{ablate, AblationAxis, AblationTable};
use crate::experiments::analysis::{gap_analysis, generation_study, GapAnalysis, GenerationStudy};
use crate::experiments::config::{ExperimentConfig, PretrainScale};
use crate::experiments::lab::{eval_scenes, write_json, Lab, LedgerEntry, ReportRow, RunResult, RunSpec};
use crate::experiments::report::{collect_rows, report_csv, report_markdown};
use crate::eval::DetectionMetrics;
use crate::tuning::Method;

/// Methods the full pipeline runs, in order.
pub const PIPELINE_METHODS: [Method; 7] = [
    Method::ZeroShot,
    Method::ConesStage1,
    Method::ConesStage2,
    Method::PromptTuning,
    Method::TextualInversion,
    Method::LinearProbe,
    Method::FullFinetune,
];

pub struct Session<'a> {
    pub lab: &'a Lab,
    pub config: ExperimentConfig,
    /// `key: old -> new` notes for values replaced by flags.
    pub overrides: Vec<String>,
}

impl<'a> Session<'a> {
    pub fn new(lab: &'a Lab, config: ExperimentConfig) -> Self {
        Self {
            lab,
            config,
            overrides: Vec::new(),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        if self.config.output.is_empty() {
            self.lab.root().join("tables").join(self.config.hash())
        } else {
            PathBuf::from(&self.config.output)
        }
    }

    fn entry(&self, command: &str) -> LedgerEntry {
        LedgerEntry {
            overrides: self.overrides.clone(),
            ..LedgerEntry::new(command, &self.config)
        }
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let dir = self.output_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let dir = self.output_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(name);
        write_json(&path, value)?;
        Ok(path)
    }

    fn artifact(&self, e: &mut LedgerEntry, p: &std::path::Path) {
        e.artifacts.push(self.lab.relative(p));
    }

    pub fn gen_data(&self) -> Result<Vec<PathBuf>> {
        let mut e = self.entry("gen-data");
        let mut dirs = Vec::new();
        for d in [Domain::InDomain, Domain::OutDomain] {
            let dir = self.lab.save_splits(&self.config, d, self.config.seed)?;
            self.artifact(&mut e, &dir);
            dirs.push(dir);
        }
        self.lab.append_ledger(&e)?;
        Ok(dirs)
    }

    pub fn pretrain(&self) -> Result<(PathBuf, DetectionMetrics)> {
        let c = &self.config;
        let ck = self.lab.pretrained(c, c.seed, c.fusion, PretrainScale::Full)?;
        let dir = self.lab.checkpoint_dir(&Lab::checkpoint_key(c, c.seed, c.fusion, PretrainScale::Full));
        let mut e = self.entry("pretrain");
        self.artifact(&mut e, &dir);
        e.metrics.insert("val_ap".into(), ck.val.ap_box);
        e.metrics.insert("val_ap_mask".into(), ck.val.ap_mask);
        self.lab.append_ledger(&e)?;
        Ok((dir, ck.val))
    }

    fn record_run(&self, command: &str, r: &RunResult, test: DetectionMetrics) -> Result<()> {
        let mut e = self.entry(command);
        if let Some(d) = &r.dir {
            self.artifact(&mut e, d);
        }
        e.metrics.insert("ap".into(), test.ap_box);
        e.metrics.insert("ap50".into(), test.ap50_box);
        e.metrics.insert("ap_mask".into(), test.ap_mask);
        e.metrics.insert("unfrozen".into(), r.record.run.unfrozen_scalars as f64);
        e.metrics.insert("text_calls".into(), r.record.run.text_calls as f64);
        e.rows.push(ReportRow::from_result(r));
        self.lab.append_ledger(&e)
    }

    pub fn tune(&self, method: Method) -> Result<std::sync::Arc<RunResult>> {
        let r = self.lab.run(&self.config, &RunSpec::from_config(&self.config, method))?;
        self.record_run("tune", &r, r.record.test)?;
        Ok(r)
    }

    /// Re-evaluates a stored (or freshly produced) run on the configured
    /// split.
    pub fn eval(&self, method: Method) -> Result<DetectionMetrics> {
        let c = &self.config;
        let spec = RunSpec::from_config(c, method);
        let r = self.lab.run(c, &spec)?;
        let splits = self.lab.splits(c, spec.domain, spec.seed)?;
        let m = r.tuned.evaluate(eval_scenes(&splits, c.eval.split))?;
        let path = self.write_json(&format!("eval-{}.json", method.as_str()), &m)?;
        let mut e = self.entry("eval");
        self.artifact(&mut e, &path);
        self.record_run_into(&mut e, &r, m);
        self.lab.append_ledger(&e)?;
        Ok(m)
    }

    fn record_run_into(&self, e: &mut LedgerEntry, r: &RunResult, m: DetectionMetrics) {
        e.metrics.insert("ap".into(), m.ap_box);
        e.metrics.insert("ap50".into(), m.ap50_box);
        e.metrics.insert("ap_mask".into(), m.ap_mask);
        e.rows.push(ReportRow {
            ap: m.ap_box,
            ap50: m.ap50_box,
            ap_mask: m.ap_mask,
            ..ReportRow::from_result(r)
        });
    }

    pub fn ablate(&self, axis: AblationAxis) -> Result<AblationTable> {
        let t = ablate(self.lab, &self.config, axis)?;
        let stem = format!("ablate-{}", axis.as_str());
        let csv = self.write(&format!("{stem}.csv"), t.to_csv())?;
        let json = self.write_json(&format!("{stem}.json"), &t)?;
        let mut e = self.entry("ablate");
        self.artifact(&mut e, &csv);
        self.artifact(&mut e, &json);
        e.metrics.insert("rows".into(), t.rows.len() as f64);
        self.lab.append_ledger(&e)?;
        Ok(t)
    }

    pub fn gap_report(&self) -> Result<GapAnalysis> {
        let g = gap_analysis(self.lab, &self.config, self.config.seed)?;
        let mut e = self.entry("gap-report");
        for p in [
            self.write("gap.csv", g.report.to_csv())?,
            self.write_json("gap.json", &g)?,
            self.write("projection.csv", g.projection_csv())?,
        ] {
            self.artifact(&mut e, &p);
        }
        e.metrics.insert("concept_distance".into(), g.mean(crate::experiments::analysis::CONCEPT_TAG));
        e.metrics.insert("text_distance".into(), g.mean(crate::experiments::analysis::TEXT_TAG));
        self.lab.append_ledger(&e)?;
        Ok(g)
    }

    pub fn generate(&self) -> Result<GenerationStudy> {
        let g = generation_study(&self.config.generate, self.config.seed)?;
        let path = self.write_json("generation.json", &g)?;
        let mut e = self.entry("generate");
        self.artifact(&mut e, &path);
        for c in &g.conditioned {
            e.metrics.insert(format!("closer_{}", c.concept), c.closer_fraction);
        }
        self.lab.append_ledger(&e)?;
        Ok(g)
    }

    /// Summary of every run in the ledger; writes `report.md` and
    /// `report.csv`.
    pub fn report(&self) -> Result<Vec<ReportRow>> {
        let rows = collect_rows(&self.lab.read_ledger()?);
        let mut e = self.entry("report");
        for p in [
            self.write("report.csv", report_csv(&rows))?,
            self.write("report.md", report_markdown(&rows))?,
        ] {
            self.artifact(&mut e, &p);
        }
        e.metrics.insert("rows".into(), rows.len() as f64);
        self.lab.append_ledger(&e)?;
        Ok(rows)
    }

    /// Every command in order: data, pretraining, all methods, ablations,
    /// gap analysis, generation and the report.
    pub fn pipeline(&self) -> Result<()> {
        self.gen_data()?;
        self.pretrain()?;
        for m in PIPELINE_METHODS {
            self.tune(m)?;
        }
        for axis in [AblationAxis::Tokens, AblationAxis::Losses, AblationAxis::Fusion] {
            self.ablate(axis)?;
        }
        self.gap_report()?;
        self.generate()?;
        self.report()?;
        Ok(())
    }
}
