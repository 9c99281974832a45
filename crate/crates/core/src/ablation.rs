//! Ablation sweeps over the PEFT hyperparameters: each cell finetunes from
//! the same pretrained backbone and evaluates, yielding a machine-readable
//! table plus simple SVG line plots.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::heads::MetricsReport;
use crate::model::{count_parameters, Model};
use crate::scene::Scene;
use crate::train::{run_eval, run_finetune};
use serde::Serialize;

/// One sweep dimension. Component toggles switch whole modules on/off at
/// the base configuration.
#[derive(Clone, Debug)]
pub enum SweepAxis {
    PromptLength(Vec<usize>),
    AdapterRank(Vec<usize>),
    CepDepth(Vec<usize>),
    Components(Vec<ComponentToggle>),
}

#[derive(Clone, Debug, Serialize, serde::Deserialize)]
pub struct ComponentToggle {
    pub label: String,
    pub cep: bool,
    pub mcp: bool,
    pub adapter: bool,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::PromptLength(_) => "prompt_length",
            SweepAxis::AdapterRank(_) => "adapter_rank",
            SweepAxis::CepDepth(_) => "cep_depth",
            SweepAxis::Components(_) => "components",
        }
    }

    fn cells(&self, base: &TrainConfig) -> Result<Vec<(String, f64, TrainConfig)>> {
        let mut out = Vec::new();
        match self {
            SweepAxis::PromptLength(vals) => {
                for &v in vals {
                    let mut cfg = base.clone();
                    cfg.peft.prompt_len = v;
                    out.push((format!("N_P={v}"), v as f64, cfg));
                }
            }
            SweepAxis::AdapterRank(vals) => {
                for &v in vals {
                    let mut cfg = base.clone();
                    cfg.peft.adapter_rank = v;
                    if v == 0 {
                        cfg.peft.adapter_msa = false;
                        cfg.peft.adapter_ffn = false;
                    }
                    out.push((format!("r={v}"), v as f64, cfg));
                }
            }
            SweepAxis::CepDepth(vals) => {
                for &v in vals {
                    let mut cfg = base.clone();
                    cfg.peft.cep_depth = v;
                    out.push((format!("depth={v}"), v as f64, cfg));
                }
            }
            SweepAxis::Components(toggles) => {
                for (i, t) in toggles.iter().enumerate() {
                    let mut cfg = base.clone();
                    if !t.cep {
                        cfg.peft.cep_depth = 0;
                    }
                    cfg.peft.mcp_enabled = t.mcp;
                    if !t.adapter {
                        cfg.peft.adapter_msa = false;
                        cfg.peft.adapter_ffn = false;
                    }
                    out.push((t.label.clone(), i as f64, cfg));
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Config("empty sweep axis".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub x: f64,
    pub trainable: usize,
    pub total: usize,
    pub final_loss: f64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

/// Finetune+eval every cell of the axis from the same pretrained backbone.
pub fn run_ablation(
    base: &TrainConfig,
    pretrained: &Model,
    train_scenes: &[Scene],
    eval_scenes: &[Scene],
    horizon: usize,
    axis: &SweepAxis,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (label, x, cfg) in axis.cells(base)? {
        cfg.validate()?;
        let (state, losses, _) = run_finetune(&cfg, pretrained, train_scenes, None, None)?;
        let counts = count_parameters(&state.model);
        let (metrics, _) = run_eval(&state.model, eval_scenes, horizon)?;
        rows.push(AblationRow {
            label,
            x,
            trainable: counts.trainable,
            total: counts.total,
            final_loss: losses.last().copied().unwrap_or(f64::NAN),
            metrics,
        });
    }
    Ok(AblationTable {
        axis: axis.name().to_string(),
        rows,
    })
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "label,x,trainable,total,final_loss,min_ade,min_fde,miss_rate,b_min_fde\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.label,
                r.x,
                r.trainable,
                r.total,
                r.final_loss,
                r.metrics.min_ade,
                r.metrics.min_fde,
                r.metrics.miss_rate,
                r.metrics.b_min_fde
            ));
        }
        s
    }

    /// Line plot of one metric against the sweep axis.
    pub fn to_svg(&self, metric: &str) -> Result<String> {
        let ys: Vec<f64> = self
            .rows
            .iter()
            .map(|r| match metric {
                "min_ade" => Ok(r.metrics.min_ade),
                "min_fde" => Ok(r.metrics.min_fde),
                "miss_rate" => Ok(r.metrics.miss_rate),
                "b_min_fde" => Ok(r.metrics.b_min_fde),
                "final_loss" => Ok(r.final_loss),
                _ => Err(Error::Config(format!("unknown metric `{metric}`"))),
            })
            .collect::<Result<_>>()?;
        let xs: Vec<f64> = self.rows.iter().map(|r| r.x).collect();
        let (w, h, ml, mb) = (480.0, 320.0, 60.0, 40.0);
        let (pw, ph) = (w - ml - 20.0, h - mb - 20.0);
        let (xmin, xmax) = span(&xs);
        let (ymin, ymax) = span(&ys);
        let px = |x: f64| ml + (x - xmin) / (xmax - xmin).max(1e-12) * pw;
        let py = |y: f64| 20.0 + ph - (y - ymin) / (ymax - ymin).max(1e-12) * ph;
        let pts: Vec<String> = xs
            .iter()
            .zip(&ys)
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
             viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
             <line x1=\"{ml}\" y1=\"20\" x2=\"{ml}\" y2=\"{y0}\" stroke=\"black\"/>\n\
             <line x1=\"{ml}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n",
            y0 = 20.0 + ph,
            x1 = ml + pw,
        );
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        for (p, r) in pts.iter().zip(&self.rows) {
            let (cx, cy) = p.split_once(',').expect("point format");
            svg.push_str(&format!(
                "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"3\" fill=\"steelblue\"><title>{}</title></circle>\n",
                r.label
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n\
             <text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\" \
             font-size=\"12\">{metric}</text>\n\
             <text x=\"{}\" y=\"16\" font-size=\"10\">[{:.4}, {:.4}]</text>\n</svg>\n",
            ml + pw / 2.0,
            h - 6.0,
            self.axis,
            20.0 + ph / 2.0,
            20.0 + ph / 2.0,
            ml,
            ymin,
            ymax,
        ));
        Ok(svg)
    }
}

fn span(v: &[f64]) -> (f64, f64) {
    let mn = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mn, mx)
}
