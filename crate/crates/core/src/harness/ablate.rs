//! Click-placement sweep for interactive segmentation.

use std::fmt::Write as _;

use super::data::{PreparedScene, Vocabulary};
use super::evaluate::{evaluate, Protocol};
use crate::error::Result;
use crate::model::Model;
use crate::scene::ClickStrategy;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub strategy: ClickStrategy,
    pub miou: f64,
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
}

/// Rows: center, one per `r_d`, random.
pub fn ablate_prompts(
    model: &Model,
    scenes: &[PreparedScene],
    vocab: &Vocabulary,
    r_d: &[f64],
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let mut strategies = vec![("center".to_string(), ClickStrategy::Center)];
    strategies.extend(
        r_d.iter()
            .map(|&r| (format!("r_d={r}"), ClickStrategy::Quantile(r))),
    );
    strategies.push(("random".to_string(), ClickStrategy::Random));
    strategies
        .into_iter()
        .map(|(label, strategy)| {
            let protocol = Protocol {
                click: strategy,
                seed,
                ..Protocol::default()
            };
            let r = evaluate(model, scenes, vocab, &protocol)?.report;
            Ok(AblationRow {
                label,
                strategy,
                miou: r.inter_miou,
                ap: r.inter_ap,
                ap50: r.inter_ap50,
                ap25: r.inter_ap25,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("prompt,miou,ap,ap50,ap25\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.4},{:.4},{:.4},{:.4}",
            r.label, r.miou, r.ap, r.ap50, r.ap25
        )
        .unwrap();
    }
    out
}
