//! Markdown and CSV report tables.
//!
//! Values come in as fractions in `[0, 1]` and render as one-decimal
//! percentages; correlations render with two decimals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::consistency::format_percent;
use crate::generation::DecodingMode;
use crate::paraphrase::QuestionSetSummary;
use crate::stats::CorrelationMatrix;

/// (metric key, column header) for the main accuracy/consistency table.
pub const MAIN_COLUMNS: [(&str, &str); 9] = [
    ("r1a", "R1-A"),
    ("bleurt", "BLEURT"),
    ("paraphrase", "PP"),
    ("pp_plus_acc", "PP+acc"),
    ("bertscore", "BERTs"),
    ("entailment", "Entail"),
    ("contradiction", "Contra"),
    ("rouge1", "R1-C"),
    ("ner_overlap", "NER"),
];

/// Columns of the table for runs over unfiltered paraphrase sets.
pub const UNFILTERED_COLUMNS: [(&str, &str); 7] = [
    ("r1a", "R1-A"),
    ("bleurt", "BLEURT"),
    ("paraphrase", "PP"),
    ("pp_plus_acc", "PP+acc"),
    ("bertscore", "BERTScore"),
    ("rouge1", "R1-C"),
    ("ner_overlap", "NER"),
];

/// Preferred row/column order for the correlation matrix.
pub const CORRELATION_ORDER: [&str; 9] = [
    "human",
    "rouge1",
    "ner_overlap",
    "bertscore",
    "paraphrase",
    "entailment",
    "contradiction",
    "r1a",
    "bleurt",
];

pub fn display_name(key: &str) -> &str {
    match key {
        "human" => "Human",
        "equality" => "Lexical",
        "rouge1" => "R1-C",
        "ner_overlap" => "NER",
        "bertscore" => "BERTs",
        "paraphrase" => "PP",
        "pp_plus_acc" => "PP+acc",
        "entailment" => "Entail",
        "contradiction" => "Contra",
        "r1a" => "R1-A",
        "bleurt" => "BLEURT",
        other => other,
    }
}

/// One (model, decoding) run's corpus-level aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub decoding: DecodingMode,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSection {
    pub matrix: CorrelationMatrix,
    /// e.g. the run and number of questions correlated.
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HumanAgreement {
    pub kappa: f64,
    pub pairs: usize,
    pub annotators: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportInput {
    pub rows: Vec<ReportRow>,
    pub unfiltered_rows: Vec<ReportRow>,
    pub correlation: Option<CorrelationSection>,
    pub human_agreement: Option<HumanAgreement>,
    pub question_sets: Vec<QuestionSetSummary>,
}

pub fn format_rho(rho: Option<f64>) -> String {
    match rho {
        None => "n/a".to_owned(),
        Some(r) => {
            let s = format!("{r:.2}");
            if s == "-0.00" {
                "0.00".to_owned()
            } else {
                s
            }
        }
    }
}

fn table_row(out: &mut String, cells: &[String]) {
    out.push('|');
    for c in cells {
        out.push(' ');
        out.push_str(c);
        out.push_str(" |");
    }
    out.push('\n');
}

fn section_title(mode: DecodingMode) -> &'static str {
    match mode {
        DecodingMode::Greedy => "Greedy",
        DecodingMode::Nucleus => "Sampled",
    }
}

/// Model rows grouped into a greedy section followed by a sampled section.
/// With no rows only the header is emitted.
pub fn render_results_table(rows: &[ReportRow], columns: &[(&str, &str)]) -> String {
    let mut out = String::new();
    let mut header = vec!["Model".to_owned()];
    header.extend(columns.iter().map(|(_, h)| h.to_string()));
    table_row(&mut out, &header);
    table_row(&mut out, &vec!["---".to_owned(); header.len()]);
    for mode in [DecodingMode::Greedy, DecodingMode::Nucleus] {
        let section: Vec<&ReportRow> = rows.iter().filter(|r| r.decoding == mode).collect();
        if section.is_empty() {
            continue;
        }
        let mut title = vec![format!("**{}**", section_title(mode))];
        title.extend(std::iter::repeat_n(String::new(), columns.len()));
        table_row(&mut out, &title);
        for r in section {
            let mut cells = vec![r.model.clone()];
            cells.extend(columns.iter().map(|(k, _)| format_percent(r.values.get(*k).copied())));
            table_row(&mut out, &cells);
        }
    }
    out
}

/// Upper-triangular correlation table; the lower triangle is left blank.
pub fn render_correlation_table(m: &CorrelationMatrix) -> String {
    let mut out = String::new();
    let mut header = vec![String::new()];
    header.extend(m.names.iter().map(|n| display_name(n).to_owned()));
    table_row(&mut out, &header);
    table_row(&mut out, &vec!["---".to_owned(); header.len()]);
    for (i, name) in m.names.iter().enumerate() {
        let mut cells = vec![display_name(name).to_owned()];
        for j in 0..m.names.len() {
            cells.push(if j < i { String::new() } else { format_rho(m.cells[i][j]) });
        }
        table_row(&mut out, &cells);
    }
    out
}

pub fn render_question_sets(summaries: &[QuestionSetSummary]) -> String {
    let mut out = String::new();
    table_row(
        &mut out,
        &["Agreement".into(), "Unfiltered".into(), "Questions".into(), "Filtered".into(), "Questions".into()],
    );
    table_row(&mut out, &vec!["---".to_owned(); 5]);
    for s in summaries {
        table_row(
            &mut out,
            &[
                display_name(&s.agreement).to_owned(),
                format_percent(s.unfiltered),
                s.unfiltered_questions.to_string(),
                format_percent(s.filtered),
                s.filtered_questions.to_string(),
            ],
        );
    }
    out
}

pub fn render_markdown(input: &ReportInput) -> String {
    let mut out = String::from("# Consistency report\n\n");
    out.push_str("## Accuracy and consistency\n\n");
    out.push_str("Accuracy: R1-A, BLEURT. Consistency: all other columns. Values are percentages.\n\n");
    out.push_str(&render_results_table(&input.rows, &MAIN_COLUMNS));

    if !input.unfiltered_rows.is_empty() {
        out.push_str("\n## Unfiltered paraphrase sets\n\n");
        out.push_str(&render_results_table(&input.unfiltered_rows, &UNFILTERED_COLUMNS));
    }

    if let Some(c) = &input.correlation {
        out.push_str("\n## Correlation of consistency scores (Spearman rho)\n\n");
        if !c.caption.is_empty() {
            out.push_str(&c.caption);
            out.push_str("\n\n");
        }
        out.push_str(&render_correlation_table(&c.matrix));
    }

    if let Some(h) = &input.human_agreement {
        let _ = write!(
            out,
            "\n## Human annotation\n\nFleiss kappa {:.2} over {} pairs and {} annotators.\n",
            h.kappa, h.pairs, h.annotators
        );
    }

    if !input.question_sets.is_empty() {
        out.push_str("\n## Question paraphrase consistency\n\n");
        out.push_str(&render_question_sets(&input.question_sets));
    }
    out
}

fn csv_string(rows: Vec<Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for r in rows {
        w.write_record(r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

/// Long-format CSV: one line per (table, model, decoding, metric) with the
/// unrounded fraction.
pub fn render_results_csv(input: &ReportInput) -> String {
    let mut rows = vec![vec!["table".into(), "model".into(), "decoding".into(), "metric".into(), "value".into()]];
    for (table, set) in [("main", &input.rows), ("unfiltered", &input.unfiltered_rows)] {
        for r in set.iter() {
            for (k, v) in &r.values {
                rows.push(vec![table.into(), r.model.clone(), r.decoding.as_str().into(), k.clone(), v.to_string()]);
            }
        }
    }
    csv_string(rows)
}

/// Full square correlation matrix; undefined cells are empty.
pub fn render_correlations_csv(m: &CorrelationMatrix) -> String {
    let mut header = vec!["metric".to_owned()];
    header.extend(m.names.iter().cloned());
    let mut rows = vec![header];
    for (i, name) in m.names.iter().enumerate() {
        let mut r = vec![name.clone()];
        r.extend(m.cells[i].iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()));
        rows.push(r);
    }
    csv_string(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, decoding: DecodingMode, percents: &[f64], columns: &[(&str, &str)]) -> ReportRow {
        ReportRow {
            model: model.into(),
            decoding,
            values: columns.iter().zip(percents).map(|((k, _), p)| (k.to_string(), p / 100.0)).collect(),
        }
    }

    #[test]
    fn rho_formatting() {
        assert_eq!(format_rho(Some(0.5249)), "0.52");
        assert_eq!(format_rho(Some(-0.001)), "0.00");
        assert_eq!(format_rho(Some(-0.28)), "-0.28");
        assert_eq!(format_rho(None), "n/a");
    }

    #[test]
    fn empty_input_is_headers_only() {
        let md = render_results_table(&[], &MAIN_COLUMNS);
        assert_eq!(
            md,
            "| Model | R1-A | BLEURT | PP | PP+acc | BERTs | Entail | Contra | R1-C | NER |\n\
             | --- | --- | --- | --- | --- | --- | --- | --- | --- | --- |\n"
        );
        let full = render_markdown(&ReportInput::default());
        assert!(full.ends_with("| --- | --- | --- | --- | --- | --- | --- | --- | --- | --- |\n"));
        assert_eq!(render_results_csv(&ReportInput::default()), "table,model,decoding,metric,value\n");
    }

    #[test]
    fn main_table_layout() {
        let rows = vec![
            row("OPT-125M", DecodingMode::Greedy, &[40.0, 50.0, 27.7, 21.4, 90.7, 26.1, 25.7, 12.0, 12.2], &MAIN_COLUMNS),
            row("GPT-3", DecodingMode::Greedy, &[59.0, 62.6, 62.2, 71.5, 92.3, 42.5, 11.3, 30.4, 19.8], &MAIN_COLUMNS),
            row("OPT-125M", DecodingMode::Nucleus, &[41.9, 50.7, 6.2, 2.5, 86.1, 5.2, 36.7, 0.2, 4.7], &MAIN_COLUMNS),
        ];
        let expected = "\
| Model | R1-A | BLEURT | PP | PP+acc | BERTs | Entail | Contra | R1-C | NER |
| --- | --- | --- | --- | --- | --- | --- | --- | --- | --- |
| **Greedy** |  |  |  |  |  |  |  |  |  |
| OPT-125M | 40.0 | 50.0 | 27.7 | 21.4 | 90.7 | 26.1 | 25.7 | 12.0 | 12.2 |
| GPT-3 | 59.0 | 62.6 | 62.2 | 71.5 | 92.3 | 42.5 | 11.3 | 30.4 | 19.8 |
| **Sampled** |  |  |  |  |  |  |  |  |  |
| OPT-125M | 41.9 | 50.7 | 6.2 | 2.5 | 86.1 | 5.2 | 36.7 | 0.2 | 4.7 |
";
        assert_eq!(render_results_table(&rows, &MAIN_COLUMNS), expected);
    }

    #[test]
    fn missing_metric_renders_dash() {
        let mut r = row("m", DecodingMode::Greedy, &[40.0], &MAIN_COLUMNS);
        r.values.insert("pp_plus_acc".into(), 0.5);
        let md = render_results_table(&[r], &MAIN_COLUMNS);
        assert!(md.contains("| m | 40.0 | - | - | 50.0 | - | - | - | - | - |"));
    }

    #[test]
    fn unfiltered_table_layout() {
        let rows = vec![
            row("opt-2.7b", DecodingMode::Greedy, &[35.2, 43.6, 35.0, 28.6, 89.6, 9.5, 9.7], &UNFILTERED_COLUMNS),
            row("opt-2.7b", DecodingMode::Nucleus, &[40.0, 48.9, 14.4, 9.2, 85.7, 0.3, 2.8], &UNFILTERED_COLUMNS),
        ];
        let expected = "\
| Model | R1-A | BLEURT | PP | PP+acc | BERTScore | R1-C | NER |
| --- | --- | --- | --- | --- | --- | --- | --- |
| **Greedy** |  |  |  |  |  |  |  |
| opt-2.7b | 35.2 | 43.6 | 35.0 | 28.6 | 89.6 | 9.5 | 9.7 |
| **Sampled** |  |  |  |  |  |  |  |
| opt-2.7b | 40.0 | 48.9 | 14.4 | 9.2 | 85.7 | 0.3 | 2.8 |
";
        assert_eq!(render_results_table(&rows, &UNFILTERED_COLUMNS), expected);
    }

    fn reference_matrix() -> CorrelationMatrix {
        let upper: [&[f64]; 9] = [
            &[1.00, 0.32, 0.15, 0.54, 0.52, 0.70, -0.28, -0.10, -0.10],
            &[1.00, 0.27, 0.23, -0.10, 0.15, -0.08, 0.10, -0.11],
            &[1.00, -0.05, -0.07, 0.01, -0.05, -0.05, -0.06],
            &[1.00, 0.66, 0.78, -0.29, -0.13, -0.22],
            &[1.00, 0.76, -0.48, -0.15, -0.09],
            &[1.00, -0.49, -0.25, -0.22],
            &[1.00, 0.05, 0.11],
            &[1.00, 0.48],
            &[1.00],
        ];
        let n = upper.len();
        let mut cells = vec![vec![None; n]; n];
        for (i, r) in upper.iter().enumerate() {
            for (k, v) in r.iter().enumerate() {
                cells[i][i + k] = Some(*v);
                cells[i + k][i] = Some(*v);
            }
        }
        CorrelationMatrix {
            names: CORRELATION_ORDER.iter().map(|s| s.to_string()).collect(),
            cells,
        }
    }

    #[test]
    fn correlation_table_layout() {
        let md = render_correlation_table(&reference_matrix());
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines[0], "|  | Human | R1-C | NER | BERTs | PP | Entail | Contra | R1-A | BLEURT |");
        assert_eq!(lines[2], "| Human | 1.00 | 0.32 | 0.15 | 0.54 | 0.52 | 0.70 | -0.28 | -0.10 | -0.10 |");
        assert_eq!(lines[3], "| R1-C |  | 1.00 | 0.27 | 0.23 | -0.10 | 0.15 | -0.08 | 0.10 | -0.11 |");
        assert_eq!(lines[10], "| BLEURT |  |  |  |  |  |  |  |  | 1.00 |");
        assert_eq!(lines.len(), 11);
    }

    #[test]
    fn correlations_csv_is_square() {
        let csv = render_correlations_csv(&reference_matrix());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[0], "metric,human,rouge1,ner_overlap,bertscore,paraphrase,entailment,contradiction,r1a,bleurt");
        assert!(lines[9].starts_with("bleurt,-0.1,-0.11,"));
    }

    #[test]
    fn markdown_is_deterministic() {
        let input = ReportInput {
            rows: vec![row("m", DecodingMode::Greedy, &[1.0, 2.0], &MAIN_COLUMNS)],
            unfiltered_rows: Vec::new(),
            correlation: Some(CorrelationSection { matrix: reference_matrix(), caption: "m, greedy".into() }),
            human_agreement: Some(HumanAgreement { kappa: 0.84, pairs: 903, annotators: 3 }),
            question_sets: vec![QuestionSetSummary {
                unfiltered: Some(0.9),
                unfiltered_questions: 5,
                filtered: Some(0.95),
                filtered_questions: 5,
                agreement: "paraphrase".into(),
            }],
        };
        let a = render_markdown(&input);
        assert_eq!(a, render_markdown(&input.clone()));
        assert!(a.contains("Fleiss kappa 0.84 over 903 pairs and 3 annotators."));
        assert!(a.contains("| PP | 90.0 | 5 | 95.0 | 5 |"));
    }
}
