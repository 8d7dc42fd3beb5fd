//! Ablation matrices over fusion kind, attention window and layer pattern.
//!
//! Every cell generates its data, builds a model and trains it from the same
//! seed, so a matrix is reproducible row for row. A cell that fails (for
//! example a window that does not tile the grid) becomes a row carrying the
//! error message and the matrix moves on.

use std::fmt;
use std::str::FromStr;

use crate::attention::WindowSpec;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::model::train::fit;
use crate::model::MoMaModel;

use super::data::{gen_task, ClipShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationMatrix {
    Fusion,
    Window,
    Pattern,
}

impl AblationMatrix {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationMatrix::Fusion => "fusion",
            AblationMatrix::Window => "window",
            AblationMatrix::Pattern => "pattern",
        }
    }
}

impl fmt::Display for AblationMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMatrix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fusion" => Ok(AblationMatrix::Fusion),
            "window" => Ok(AblationMatrix::Window),
            "pattern" => Ok(AblationMatrix::Pattern),
            other => Err(Error::Config(format!("unknown matrix {other:?}; expected fusion, window or pattern"))),
        }
    }
}

/// One configuration of a matrix: a row label and the config it trains.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub label: String,
    /// The value that varies along the matrix, as written in the config.
    pub setting: String,
    pub config: ExperimentConfig,
}

/// Cells of `matrix` derived from `base`.
///
/// Window rows scale the reference list to the base token grid: the whole
/// frame, half a frame, the default half-by-half window, a cube holding as
/// many tokens as the default window, and a quarter-by-quarter window.
/// Pattern rows scale the reference depth of twelve to the base depth.
pub fn cells(base: &ExperimentConfig, matrix: AblationMatrix) -> Vec<AblationCell> {
    let with = |label: String, setting: String, edit: &dyn Fn(&mut ExperimentConfig)| {
        let mut config = base.clone();
        edit(&mut config);
        AblationCell { label, setting, config }
    };
    match matrix {
        AblationMatrix::Fusion => FusionKind::ALL
            .iter()
            .map(|&kind| with(kind.as_str().into(), kind.as_str().into(), &|c| c.model.fusion = kind))
            .collect(),
        AblationMatrix::Window => {
            let (gh, gw) = (base.model.height / base.model.patch.max(1), base.model.width / base.model.patch.max(1));
            let half = |n: usize| (n / 2).max(1);
            let quarter = |n: usize| (n / 4).max(1);
            let windows = [
                ("full", format!("{gh}x{gw}")),
                ("large", format!("{}x{}", half(gh), gw)),
                ("default", format!("{}x{}", half(gh), half(gw))),
                ("cubic", format!("{}x{}x{}", half(gh) * half(gw), quarter(gh), quarter(gw))),
                ("small", format!("{}x{}", quarter(gh), quarter(gw))),
            ];
            windows
                .into_iter()
                .map(|(label, w)| with(label.into(), w.clone(), &|c| c.model.window = w.clone()))
                .collect()
        }
        AblationMatrix::Pattern => {
            let l = base.model.layers;
            let h = (l / 2).max(1);
            let patterns = [
                ("alternating", format!("[TM]{l}")),
                ("decoder", format!("[T]{l}[M]{l}")),
                ("late-double", format!("[T]{h}[TMM]{h}")),
                ("late-single", format!("[T]{h}[TM]{h}")),
                ("paired", format!("[TTMM]{h}")),
            ];
            patterns
                .into_iter()
                .map(|(label, p)| with(label.into(), p.clone(), &|c| c.model.pattern = p.clone()))
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub matrix: AblationMatrix,
    pub label: String,
    pub setting: String,
    pub seed: u64,
    pub val_accuracy: Option<f64>,
    pub trainable_params: Option<usize>,
    pub flops: Option<u64>,
    pub error: Option<String>,
}

fn run_cell(cell: &AblationCell, seed: u64) -> Result<(f64, usize, u64)> {
    let mut cfg = cell.config.clone();
    cfg.train.seed = seed;
    cfg.model.validate()?;
    cfg.model.window_spec()?;
    let data = gen_task(&cfg.task, ClipShape::of(&cfg.model), seed)?;
    let mut model = MoMaModel::new(&cfg.model, seed)?;
    let report = fit(&mut model, &cfg.train, &data.train, &data.val)?;
    Ok((report.final_val_accuracy(), model.parameter_counts().0, model.flop_count()))
}

/// Trains every cell of `matrix` once per seed. `progress` sees each row as it completes.
pub fn run_ablation(
    base: &ExperimentConfig,
    matrix: AblationMatrix,
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRow),
) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for cell in cells(base, matrix) {
        for &seed in seeds {
            let row = match run_cell(&cell, seed) {
                Ok((acc, params, flops)) => AblationRow {
                    matrix,
                    label: cell.label.clone(),
                    setting: cell.setting.clone(),
                    seed,
                    val_accuracy: Some(acc),
                    trainable_params: Some(params),
                    flops: Some(flops),
                    error: None,
                },
                Err(e) => AblationRow {
                    matrix,
                    label: cell.label.clone(),
                    setting: cell.setting.clone(),
                    seed,
                    val_accuracy: None,
                    trainable_params: None,
                    flops: None,
                    error: Some(e.to_string()),
                },
            };
            progress(&row);
            rows.push(row);
        }
    }
    rows
}

/// `WindowSpec` of a window cell, when it parses.
pub fn cell_window(cell: &AblationCell) -> Option<WindowSpec> {
    cell.config.model.window.parse().ok()
}
