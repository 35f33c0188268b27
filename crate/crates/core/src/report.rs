//! Per-cell scoring and the evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ab::{AbReport, AbSummary, DIMENSIONS};
use crate::corpus::{AnnotationRecord, CleanArticle, Label, NONE_LABEL};
use crate::metrics::{
    alignment_disparity, rationale_similarity_batch, severity_macro_f1, span_f1, MetricError, RationaleScorer,
    SubgroupSlice,
};
use crate::prompt::{Assessment, ParseStatus, PromptCondition};

/// `{article_id}::{condition}::{model_id}`
pub fn cell_id(article_id: &str, condition: PromptCondition, model_id: &str) -> String {
    format!("{article_id}::{condition}::{model_id}")
}

/// One model answer to be scored against its reference article.
#[derive(Debug, Clone, Copy)]
pub struct ScoringInput<'a> {
    pub article_id: &'a str,
    pub condition: PromptCondition,
    pub model_id: &'a str,
    pub assessment: &'a Assessment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub cell_id: String,
    pub article_id: String,
    pub language: String,
    pub condition: PromptCondition,
    pub model_id: String,
    pub pred_label: String,
    pub ref_label: String,
    pub span_f1: f64,
    pub rationale_similarity: f64,
    pub parse_status: ParseStatus,
}

/// Scores every input. Failed parses get span F1 and rationale similarity
/// of 0 and the `UNPARSED` severity label.
pub fn score_cells(
    inputs: &[ScoringInput<'_>],
    references: &BTreeMap<String, CleanArticle>,
    scorer: &dyn RationaleScorer,
) -> Result<Vec<CellScore>, MetricError> {
    let mut rationale_pairs = Vec::new();
    let mut slots = Vec::with_capacity(inputs.len());
    for input in inputs {
        let reference =
            references.get(input.article_id).ok_or_else(|| MetricError::MissingGroup(input.article_id.to_string()))?;
        if input.assessment.parse_status == ParseStatus::Failed {
            slots.push(None);
        } else {
            slots.push(Some(rationale_pairs.len()));
            rationale_pairs.push((input.assessment.rationale.clone(), reference.rationale.clone()));
        }
    }
    let similarities = rationale_similarity_batch(&rationale_pairs, scorer)?;

    let mut out: Vec<CellScore> = inputs
        .iter()
        .zip(slots)
        .map(|(input, slot)| {
            let reference = &references[input.article_id];
            let a = input.assessment;
            let failed = a.parse_status == ParseStatus::Failed;
            CellScore {
                cell_id: cell_id(input.article_id, input.condition, input.model_id),
                article_id: input.article_id.to_string(),
                language: reference.language.clone(),
                condition: input.condition,
                model_id: input.model_id.to_string(),
                pred_label: a.severity_label().to_string(),
                ref_label: reference.severity_label().to_string(),
                span_f1: if failed { 0.0 } else { span_f1(&a.spans, &reference.span_texts()) },
                rationale_similarity: slot.map_or(0.0, |i| similarities[i]),
                parse_status: a.parse_status,
            }
        })
        .collect();
    out.sort_by(|a, b| a.cell_id.cmp(&b.cell_id));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: PromptCondition,
    pub model_id: String,
    pub language: String,
    pub items: usize,
    pub severity_macro_f1: f64,
    pub mean_span_f1: f64,
    pub mean_rationale_similarity: f64,
    pub parse_repaired: usize,
    pub parse_failed: usize,
}

/// Δ for one subgroup pairing of one model across every condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityRow {
    pub model_id: String,
    pub grouping_key: String,
    pub group_a: String,
    pub group_b: String,
    pub by_condition: BTreeMap<PromptCondition, SubgroupSlice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scorer: String,
    pub rows: Vec<ReportRow>,
    pub disparities: Vec<DisparityRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ab: Option<AbReport>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Aggregates cell scores into one row per (condition, model, language).
pub fn summarize_cells(scores: &[CellScore]) -> Result<Vec<ReportRow>, MetricError> {
    let mut groups: BTreeMap<(PromptCondition, &str, &str), Vec<&CellScore>> = BTreeMap::new();
    for s in scores {
        groups.entry((s.condition, &s.model_id, &s.language)).or_default().push(s);
    }
    groups
        .into_iter()
        .map(|((condition, model_id, language), cells)| {
            let pairs: Vec<(&str, &str)> =
                cells.iter().map(|c| (c.pred_label.as_str(), c.ref_label.as_str())).collect();
            Ok(ReportRow {
                condition,
                model_id: model_id.to_string(),
                language: language.to_string(),
                items: cells.len(),
                severity_macro_f1: severity_macro_f1(&pairs, &[])?,
                mean_span_f1: mean(cells.iter().map(|c| c.span_f1)),
                mean_rationale_similarity: mean(cells.iter().map(|c| c.rationale_similarity)),
                parse_repaired: cells.iter().filter(|c| c.parse_status == ParseStatus::Repaired).count(),
                parse_failed: cells.iter().filter(|c| c.parse_status == ParseStatus::Failed).count(),
            })
        })
        .collect()
}

/// `(pred, ref)` severity pairs per `(model, condition)` and group.
type PairsByCell<'a> = BTreeMap<(&'a str, PromptCondition), BTreeMap<String, Vec<(String, String)>>>;

fn collect_disparities(grouping_key: &str, per_cell: PairsByCell<'_>) -> Vec<DisparityRow> {
    let mut rows: BTreeMap<(String, String, String), DisparityRow> = BTreeMap::new();
    for ((model_id, condition), groups) in per_cell {
        // a condition with fewer than two populated groups has no Δ
        let Ok(slices) = alignment_disparity(grouping_key, &groups, &[], &[]) else {
            continue;
        };
        for slice in slices {
            let key = (model_id.to_string(), slice.group_a.clone(), slice.group_b.clone());
            rows.entry(key)
                .or_insert_with(|| DisparityRow {
                    model_id: model_id.to_string(),
                    grouping_key: grouping_key.to_string(),
                    group_a: slice.group_a.clone(),
                    group_b: slice.group_b.clone(),
                    by_condition: BTreeMap::new(),
                })
                .by_condition
                .insert(condition, slice);
        }
    }
    rows.into_values().collect()
}

/// Δ between languages against the article-level reference.
pub fn disparity_by_language(scores: &[CellScore]) -> Vec<DisparityRow> {
    let mut per_cell: PairsByCell<'_> = BTreeMap::new();
    for s in scores {
        per_cell
            .entry((&s.model_id, s.condition))
            .or_default()
            .entry(s.language.clone())
            .or_default()
            .push((s.pred_label.clone(), s.ref_label.clone()));
    }
    collect_disparities("language", per_cell)
}

/// Δ between annotator subgroups, taking each kept annotation whose
/// `annotator_meta[key]` is set as a reference for its article.
pub fn disparity_by_annotator(scores: &[CellScore], annotations: &[AnnotationRecord], key: &str) -> Vec<DisparityRow> {
    let mut refs: BTreeMap<&str, Vec<(&str, String)>> = BTreeMap::new();
    for a in annotations {
        let Some(group) = a.annotator_meta.get(key) else { continue };
        let label = match a.label {
            Label::None => NONE_LABEL.to_string(),
            Label::Problematic => match &a.severity {
                Some(s) => s.clone(),
                None => continue,
            },
            Label::NotApplicable => continue,
        };
        refs.entry(&a.article_id).or_default().push((group, label));
    }
    let mut per_cell: PairsByCell<'_> = BTreeMap::new();
    for s in scores {
        for (group, label) in refs.get(s.article_id.as_str()).into_iter().flatten() {
            per_cell
                .entry((&s.model_id, s.condition))
                .or_default()
                .entry(group.to_string())
                .or_default()
                .push((s.pred_label.clone(), label.clone()));
        }
    }
    collect_disparities(key, per_cell)
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

fn ab_table(out: &mut String, title: &str, s: &AbSummary, report: &AbReport) {
    let _ = writeln!(out, "\n#### {title} ({} items)\n", s.items);
    let _ = writeln!(out, "| condition | {} |", DIMENSIONS.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(DIMENSIONS.len()));
    for condition in [report.baseline, report.challenger] {
        let cells: Vec<String> = DIMENSIONS
            .iter()
            .map(|d| match s.scores.get(&condition).and_then(|m| m.get(*d)) {
                Some(m) => format!("{} ± {}", f4(m.mean), f4(m.sd)),
                None => "n/a".into(),
            })
            .collect();
        let _ = writeln!(out, "| {condition} | {} |", cells.join(" | "));
    }
    let h = s.head_to_head;
    let _ = writeln!(
        out,
        "\n{} vs {} on overall: {} wins, {} ties, {} losses",
        report.challenger, report.baseline, h.wins, h.ties, h.losses
    );
}

impl Report {
    pub fn render_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# Evaluation report\n");
        let _ = writeln!(out, "Rationale scorer: `{}`\n", self.scorer);
        let _ = writeln!(out, "## Automated metrics\n");
        let _ = writeln!(
            out,
            "| condition | model | language | items | severity macro-F1 | span F1 | rationale sim | repaired | failed |"
        );
        let _ = writeln!(out, "|---|---|---|---|---|---|---|---|---|");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                r.condition,
                r.model_id,
                r.language,
                r.items,
                f4(r.severity_macro_f1),
                f4(r.mean_span_f1),
                f4(r.mean_rationale_similarity),
                r.parse_repaired,
                r.parse_failed
            );
        }

        let _ = writeln!(out, "\n## Alignment disparity\n");
        if self.disparities.is_empty() {
            let _ = writeln!(out, "No subgroup pairing had scored items in both groups.");
        } else {
            let conditions: Vec<PromptCondition> = PromptCondition::ALL
                .into_iter()
                .filter(|c| self.disparities.iter().any(|d| d.by_condition.contains_key(c)))
                .collect();
            let header: Vec<String> = conditions.iter().map(|c| format!("Δ {c}")).collect();
            let _ = writeln!(out, "| model | grouping | A / B | {} |", header.join(" | "));
            let _ = writeln!(out, "|---|---|---|{}", "---|".repeat(conditions.len()));
            for d in &self.disparities {
                let cells: Vec<String> = conditions
                    .iter()
                    .map(|c| match d.by_condition.get(c) {
                        Some(s) => format!("{} ({} / {})", f4(s.delta), f4(s.f1_a), f4(s.f1_b)),
                        None => "n/a".into(),
                    })
                    .collect();
                let _ = writeln!(
                    out,
                    "| {} | {} | {} / {} | {} |",
                    d.model_id,
                    d.grouping_key,
                    d.group_a,
                    d.group_b,
                    cells.join(" | ")
                );
            }
        }

        let _ = writeln!(out, "\n## Blinded A/B rating\n");
        match &self.ab {
            None => {
                let _ = writeln!(out, "No A/B ratings were supplied for this run.");
            }
            Some(ab) => {
                ab_table(&mut out, "All languages", &ab.overall, ab);
                for (language, s) in &ab.by_language {
                    ab_table(&mut out, &format!("Language {language}"), s, ab);
                }
                for (key, groups) in &ab.by_evaluator_group {
                    for (group, s) in groups {
                        ab_table(&mut out, &format!("Evaluators with {key} = {group}"), s, ab);
                    }
                }
            }
        }
        out
    }

    /// Writes `report.json` and `report.md` into `dir`.
    pub fn emit(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        json.push('\n');
        std::fs::write(dir.join("report.json"), json)?;
        std::fs::write(dir.join("report.md"), self.render_markdown())
    }
}

/// Writes `scores.jsonl`, one [`CellScore`] per line in cell order.
pub fn write_scores(path: &Path, scores: &[CellScore]) -> std::io::Result<()> {
    let mut out = String::new();
    for s in scores {
        out.push_str(&serde_json::to_string(s).map_err(std::io::Error::other)?);
        out.push('\n');
    }
    std::fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ArticleLabel, SpanAnnotation};
    use crate::embed::{Embedder, HashedNgramEmbedder};
    use crate::metrics::EmbeddingCosineScorer;
    use crate::prompt::parse_model_output;
    use std::sync::Arc;

    fn scorer() -> EmbeddingCosineScorer {
        EmbeddingCosineScorer::new(Arc::new(Embedder::new(Arc::new(HashedNgramEmbedder::new(3, 256)))))
    }

    fn reference(id: &str, lang: &str, severity: Option<&str>) -> CleanArticle {
        CleanArticle {
            article_id: id.into(),
            language: lang.into(),
            article_text: "text".into(),
            label: if severity.is_some() { ArticleLabel::Problematic } else { ArticleLabel::None },
            severity: severity.map(String::from),
            spans: severity.map(|_| vec![SpanAnnotation { text: "the enemy".into(), range: None }]).unwrap_or_default(),
            rationale: severity.map(|_| "hostile framing".to_string()).unwrap_or_default(),
            source_record_id: format!("r-{id}"),
            rejected_record_ids: vec![],
            metadata: BTreeMap::new(),
        }
    }

    fn refs() -> BTreeMap<String, CleanArticle> {
        [("a".to_string(), reference("a", "fa", Some("high"))), ("b".to_string(), reference("b", "it", None))].into()
    }

    #[test]
    fn scores_follow_conventions() {
        let good = parse_model_output(
            "<SEVERITY>high</SEVERITY><SPANS>[\"the enemy\"]</SPANS><RATIONALE>hostile framing</RATIONALE>",
            &[],
        );
        let none = parse_model_output("<SEVERITY>None</SEVERITY><SPANS>[]</SPANS><RATIONALE>[]</RATIONALE>", &[]);
        let failed = parse_model_output("no idea", &[]);
        let inputs = [
            ScoringInput { article_id: "a", condition: PromptCondition::A1, model_id: "m", assessment: &good },
            ScoringInput { article_id: "b", condition: PromptCondition::A1, model_id: "m", assessment: &none },
            ScoringInput { article_id: "b", condition: PromptCondition::B0, model_id: "m", assessment: &failed },
        ];
        let s = score_cells(&inputs, &refs(), &scorer()).unwrap();
        let by_id: BTreeMap<_, _> = s.iter().map(|c| (c.cell_id.as_str(), c)).collect();
        let a = by_id["a::A1::m"];
        assert_eq!(a.span_f1, 1.0);
        assert!((a.rationale_similarity - 1.0).abs() < 1e-9);
        let b = by_id["b::A1::m"];
        assert_eq!((b.span_f1, b.rationale_similarity), (1.0, 1.0));
        let f = by_id["b::B0::m"];
        assert_eq!((f.span_f1, f.rationale_similarity), (0.0, 0.0));
        assert_eq!(f.pred_label, "UNPARSED");
        assert!(s.windows(2).all(|w| w[0].cell_id < w[1].cell_id));
    }

    fn cell(article: &str, lang: &str, condition: PromptCondition, pred: &str, gold: &str) -> CellScore {
        CellScore {
            cell_id: cell_id(article, condition, "m"),
            article_id: article.into(),
            language: lang.into(),
            condition,
            model_id: "m".into(),
            pred_label: pred.into(),
            ref_label: gold.into(),
            span_f1: 0.5,
            rationale_similarity: 0.25,
            parse_status: ParseStatus::Clean,
        }
    }

    #[test]
    fn language_disparity_and_rendering() {
        let scores = vec![
            cell("f1", "fa", PromptCondition::B1, "high", "high"),
            cell("f2", "fa", PromptCondition::B1, "low", "low"),
            cell("i1", "it", PromptCondition::B1, "low", "high"),
            cell("i2", "it", PromptCondition::B1, "low", "low"),
        ];
        let d = disparity_by_language(&scores);
        assert_eq!(d.len(), 1);
        let slice = &d[0].by_condition[&PromptCondition::B1];
        assert_eq!((slice.group_a.as_str(), slice.group_b.as_str()), ("fa", "it"));
        let it = severity_macro_f1(&[("low", "high"), ("low", "low")], &[]).unwrap();
        assert_eq!(slice.delta, crate::metrics::disparity(1.0, it));

        let report = Report { scorer: "x".into(), rows: summarize_cells(&scores).unwrap(), disparities: d, ab: None };
        let md = report.render_markdown();
        assert!(md.contains("No A/B ratings were supplied"));
        assert!(md.contains("| B1 | m | fa | 2 | 1.0000 | 0.5000 | 0.2500 | 0 | 0 |"));
        assert_eq!(md, report.render_markdown());

        let dir = tempfile::tempdir().unwrap();
        report.emit(dir.path()).unwrap();
        let first = std::fs::read(dir.path().join("report.json")).unwrap();
        let back: Report = serde_json::from_slice(&first).unwrap();
        back.emit(dir.path()).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join("report.json")).unwrap());
    }

    #[test]
    fn annotator_disparity_uses_each_annotation() {
        let scores = vec![cell("a", "fa", PromptCondition::M1, "high", "high")];
        let mk = |id: &str, gender: &str, sev: &str| AnnotationRecord {
            record_id: id.into(),
            article_id: "a".into(),
            language: "fa".into(),
            article_text: "t".into(),
            label: Label::Problematic,
            severity: Some(sev.into()),
            span_text: None,
            span_offsets: None,
            rationale: None,
            annotator_id: id.into(),
            annotator_meta: [("gender".to_string(), gender.to_string())].into(),
        };
        let ann = vec![mk("r1", "F", "high"), mk("r2", "M", "low")];
        let d = disparity_by_annotator(&scores, &ann, "gender");
        let s = &d[0].by_condition[&PromptCondition::M1];
        assert_eq!((s.f1_a, s.f1_b, s.delta), (1.0, 0.0, 1.0));
        assert!(disparity_by_annotator(&scores, &ann, "l1").is_empty());
    }
}
