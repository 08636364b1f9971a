use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::eval::{EvalConfig, EvalReport};
use super::pipeline::{evaluate_detector, Detector, InferenceOptions};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{AblationVariant, PipelineOptions};
use crate::shape_prior::ShapeCodebook;
use crate::training::{train, TrainConfig};

/// One configuration of the ablation table: the refinement toggles plus
/// the attention wiring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationRow {
    pub name: String,
    pub variant: AblationVariant,
    /// `false` trains and evaluates the coarse heads only.
    pub refinement: bool,
    pub visible_attention: bool,
    pub reclass: bool,
    pub shape_prior_refinement: bool,
    pub shape_prior_postprocess: bool,
    pub feature_matching: bool,
}

impl Default for AblationRow {
    fn default() -> Self {
        Self::full("full")
    }
}

impl AblationRow {
    pub fn full(name: &str) -> Self {
        let p = PipelineOptions::default();
        Self {
            name: name.into(),
            variant: p.variant,
            refinement: p.refinement,
            visible_attention: p.visible_attention,
            reclass: p.reclass,
            shape_prior_refinement: p.shape_prior_refinement,
            shape_prior_postprocess: p.shape_prior_postprocess,
            feature_matching: p.feature_matching,
        }
    }

    pub fn coarse_only(name: &str) -> Self {
        Self {
            refinement: false,
            visible_attention: false,
            reclass: false,
            shape_prior_refinement: false,
            shape_prior_postprocess: false,
            feature_matching: false,
            ..Self::full(name)
        }
    }

    pub fn pipeline(&self) -> PipelineOptions {
        PipelineOptions {
            variant: self.variant,
            refinement: self.refinement,
            visible_attention: self.visible_attention,
            shape_prior_refinement: self.shape_prior_refinement,
            shape_prior_postprocess: self.shape_prior_postprocess,
            reclass: self.reclass,
            feature_matching: self.feature_matching,
        }
    }

    /// `base` with this row's pipeline; losses of disabled parts are off.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.pipeline = self.pipeline();
        cfg.terms.reclass &= self.reclass && self.refinement;
        cfg.terms.amodal_fm &= self.feature_matching && self.refinement;
        cfg.terms.visible_fm &= self.feature_matching && self.refinement;
        cfg
    }
}

/// Ablation run description, read from TOML. Relative paths resolve
/// against the grid file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    /// Dataset root holding `train` and `val` splits.
    pub data: PathBuf,
    pub codebook: PathBuf,
    /// Output CSV.
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(rename = "row")]
    pub rows: Vec<AblationRow>,
}

impl AblationGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let mut g: Self = toml::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut g.data, &mut g.codebook, &mut g.out] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if g.seeds.is_empty() || g.rows.is_empty() {
            return Err(Error::Config("an ablation grid needs at least one seed and one row".into()));
        }
        g.train.validate()?;
        g.eval.validate()?;
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub row: AblationRow,
    pub per_seed: Vec<EvalReport>,
    pub mean: EvalReport,
}

/// Trains one model per row and seed on `train_set`, evaluates each on
/// `val_set`, and averages over seeds.
pub fn run_ablation(
    train_set: &Dataset,
    val_set: &Dataset,
    codebook: Option<&ShapeCodebook>,
    base: &TrainConfig,
    rows: &[AblationRow],
    seeds: &[u64],
    eval: &EvalConfig,
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..row.apply(base) };
            log::info!("ablation row `{}` seed {seed}", row.name);
            let trained = train(train_set, codebook, &cfg)?;
            let detector = Detector::new(&trained.model, &cfg.pipeline, codebook, InferenceOptions::from_eval(eval))?;
            per_seed.push(evaluate_detector(&detector, val_set, eval)?.0);
        }
        out.push(AblationResult { row: row.clone(), mean: EvalReport::mean(&per_seed), per_seed });
    }
    Ok(out)
}

pub const ABLATION_CSV_HEADER: &str = "name,variant,refinement,visible_attention,reclass,shape_prior_refinement,\
shape_prior_postprocess,feature_matching,seeds";

pub fn write_ablation_csv(results: &[AblationResult], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{ABLATION_CSV_HEADER},{}", EvalReport::CSV_HEADER)?;
    for r in results {
        let row = &r.row;
        let metrics: Vec<String> = r.mean.csv_fields().iter().map(|v| format!("{v:.6}")).collect();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            row.name,
            row.variant.name(),
            row.refinement,
            row.visible_attention,
            row.reclass,
            row.shape_prior_refinement,
            row.shape_prior_postprocess,
            row.feature_matching,
            r.per_seed.len(),
            metrics.join(",")
        )?;
    }
    w.flush()?;
    Ok(())
}
