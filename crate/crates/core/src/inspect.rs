//! Labeled dumps of the learned graphs and voting weights for one instance.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tape;
use crate::data::{decode_scene, vocab, Instance, Task, ACTIONS, CATEGORIES};
use crate::error::{HglError, Result};
use crate::model::{self, Model, Prediction};
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::train::write_file;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMatrix {
    pub title: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Tensor,
}

impl LabeledMatrix {
    pub fn new(title: impl Into<String>, row_labels: Vec<String>, col_labels: Vec<String>, values: Tensor) -> Result<Self> {
        if values.shape() != [row_labels.len(), col_labels.len()] {
            return Err(HglError::dim(
                "labeled_matrix",
                values.shape(),
                &[row_labels.len(), col_labels.len()],
            ));
        }
        Ok(LabeledMatrix {
            title: title.into(),
            row_labels,
            col_labels,
            values,
        })
    }

    /// Aligned text table with 4-decimal entries.
    pub fn to_text(&self) -> String {
        let width = self
            .col_labels
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(0)
            .max(6);
        let label_w = self.row_labels.iter().map(String::len).max().unwrap_or(0).max(1);
        let mut out = format!("{}\n", self.title);
        let _ = write!(out, "{:label_w$}", "");
        for c in &self.col_labels {
            let _ = write!(out, " {c:>width$}");
        }
        out.push('\n');
        for (r, label) in self.row_labels.iter().enumerate() {
            let _ = write!(out, "{label:label_w$}");
            for v in self.values.row(r) {
                let _ = write!(out, " {v:>width$.4}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row");
        for c in &self.col_labels {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (r, label) in self.row_labels.iter().enumerate() {
            out.push_str(label);
            for v in self.values.row(r) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphDump {
    /// Object-to-word adjacency per candidate; empty when the module is off.
    pub vahg: Vec<LabeledMatrix>,
    /// Question-word-to-word adjacency per candidate; empty when off.
    pub qahg: Vec<LabeledMatrix>,
    /// Cell-to-cell voting weights; `None` when the voting block is off.
    pub votes: Option<LabeledMatrix>,
    pub modality: Vec<(f64, f64)>,
    pub prediction: Prediction,
}

fn token_labels(tokens: &[usize]) -> Vec<String> {
    tokens.iter().map(|t| t.to_string()).collect()
}

pub fn dump_graphs(store: &ParameterStore, model: &Model, inst: &Instance) -> Result<GraphDump> {
    let mut tape = Tape::new();
    let trace = model::forward(&mut tape, store, model, inst)?;
    let objects: Vec<String> = (0..inst.boxes.len()).map(|k| format!("obj{k}")).collect();
    let mut vahg = Vec::new();
    let mut qahg = Vec::new();
    for (k, c) in trace.candidates.iter().enumerate() {
        let cols = token_labels(&inst.candidates[k]);
        if let Some(v) = c.vahg {
            vahg.push(LabeledMatrix::new(
                format!("vision-to-answer adjacency, candidate {k}"),
                objects.clone(),
                cols.clone(),
                tape.value(v.adjacency).clone(),
            )?);
        }
        if let Some(q) = c.qahg {
            qahg.push(LabeledMatrix::new(
                format!("question-to-answer adjacency, candidate {k}"),
                token_labels(&inst.question),
                cols,
                tape.value(q.adjacency).clone(),
            )?);
        }
    }
    let votes = match trace.embedded.cvm {
        Some(out) => {
            let cells: Vec<String> = (0..inst.scene.rows()).map(|p| format!("p{p}")).collect();
            Some(LabeledMatrix::new(
                "voting weights (row i receives from column j)",
                cells.clone(),
                cells,
                tape.value(out.votes).clone(),
            )?)
        }
        None => None,
    };
    Ok(GraphDump {
        vahg,
        qahg,
        votes,
        modality: trace.candidates.iter().map(|c| c.modality.values(&tape)).collect(),
        prediction: trace.prediction(&tape)?,
    })
}

fn legend(tokens: &[usize]) -> String {
    let words: Vec<String> = tokens.iter().map(|&t| format!("{t}={}", vocab::name(t))).collect();
    words.join(" ")
}

impl GraphDump {
    pub fn to_text(&self, inst: &Instance) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "task: {}", inst.task.name());
        let _ = writeln!(out, "question: {}", legend(&inst.question));
        for (k, c) in inst.candidates.iter().enumerate() {
            let mark = if k == inst.gold { " (gold)" } else { "" };
            let _ = writeln!(out, "candidate {k}{mark}: {}", legend(c));
        }
        let probs: Vec<String> = self.prediction.probabilities.data().iter().map(|p| format!("{p:.4}")).collect();
        let _ = writeln!(out, "probabilities: {}  chosen: {}", probs.join(" "), self.prediction.chosen);
        for (k, (wo, wq)) in self.modality.iter().enumerate() {
            let _ = writeln!(out, "modality weights, candidate {k}: w_o {wo:.4} w_q {wq:.4}");
        }
        for m in self.vahg.iter().chain(&self.qahg).chain(&self.votes) {
            out.push('\n');
            out.push_str(&m.to_text());
        }
        out
    }

    /// Writes `graphs.txt` plus one CSV per matrix under `dir`.
    pub fn write(&self, inst: &Instance, dir: &Path) -> Result<()> {
        write_file(&dir.join("graphs.txt"), &self.to_text(inst))?;
        for (k, m) in self.vahg.iter().enumerate() {
            write_file(&dir.join(format!("vahg_candidate{k}.csv")), &m.to_csv())?;
        }
        for (k, m) in self.qahg.iter().enumerate() {
            write_file(&dir.join(format!("qahg_candidate{k}.csv")), &m.to_csv())?;
        }
        if let Some(v) = &self.votes {
            write_file(&dir.join("votes.csv"), &v.to_csv())?;
        }
        Ok(())
    }
}

/// Fraction of action questions whose strongest vision-to-answer edge, in
/// the gold candidate, joins the queried object to the action word.
/// Returns `None` when nothing is probeable (no such instances, or the
/// vision module is off).
pub fn alignment_probe(store: &ParameterStore, model: &Model, instances: &[Instance]) -> Result<Option<f64>> {
    if !model.config.use_vahg {
        return Ok(None);
    }
    let (mut probed, mut hits) = (0usize, 0usize);
    for inst in instances {
        if inst.task != Task::Answer || inst.question.contains(&vocab::WEATHER) {
            continue;
        }
        let categories = vocab::CATEGORY..vocab::CATEGORY + CATEGORIES;
        let actions = vocab::ACTION..vocab::ACTION + ACTIONS;
        let Some(referent) = inst.question.iter().find(|t| categories.contains(t)) else {
            continue;
        };
        let gold = &inst.candidates[inst.gold];
        let Some(word) = gold.iter().position(|t| actions.contains(t)) else {
            continue;
        };
        let scene = decode_scene(inst);
        let Some(object) = scene.objects.iter().position(|o| o.0 + vocab::CATEGORY == *referent) else {
            continue;
        };
        let dump = dump_graphs(store, model, inst)?;
        let adj = &dump.vahg[inst.gold].values;
        let best = model::argmax_first(adj.data());
        probed += 1;
        if best / adj.cols() == object && best % adj.cols() == word {
            hits += 1;
        }
    }
    Ok((probed > 0).then(|| hits as f64 / probed as f64))
}
