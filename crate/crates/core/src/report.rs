//! Report bundles and their single-file HTML rendering.
//!
//! The JSON bundle is the canonical artifact; HTML is derived from it and
//! only shows numbers that are stored in the bundle.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::audit::AuditReport;
use crate::dlsi::{DeltaLsiResult, Tier};
use crate::error::Result;
use crate::{SCHEMA_VERSION, VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "result", rename_all = "snake_case")]
pub enum ReportPayload {
    Audit(Box<AuditReport>),
    Dlsi(Box<DeltaLsiResult>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    /// RFC 3339 creation time.
    pub created: String,
    pub plan_hash: String,
    /// Free-form echo of the settings that produced the payload.
    pub config: serde_json::Value,
    pub payload: ReportPayload,
}

impl ReportBundle {
    pub fn new(
        payload: ReportPayload,
        config: serde_json::Value,
        created: impl Into<String>,
    ) -> Self {
        let plan_hash = match &payload {
            ReportPayload::Audit(a) => a.plan_hash.clone(),
            ReportPayload::Dlsi(d) => d.guarded_plan_hash.clone(),
        };
        ReportBundle {
            schema_version: SCHEMA_VERSION,
            tool: "leakguard".into(),
            version: VERSION.into(),
            created: created.into(),
            plan_hash,
            config,
            payload,
        }
    }

    /// Bundle stamped with the current UTC time.
    pub fn now(payload: ReportPayload, config: serde_json::Value) -> Self {
        let ts = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        ReportBundle::new(payload, config, ts)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<ReportBundle> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Four decimals; missing values render as `NA`.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.4}")
    } else {
        "NA".into()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_else(|| "NA".into())
}

fn flag(b: bool) -> &'static str {
    if b {
        "TRUE"
    } else {
        "FALSE"
    }
}

const STYLE: &str = "body{font-family:sans-serif;max-width:60em;margin:2em auto;color:#222}\
table{border-collapse:collapse;margin:0.5em 0}\
td,th{border:1px solid #bbb;padding:0.2em 0.6em;text-align:left}\
th{background:#eee}\
.banner{background:#fff3cd;border:1px solid #d6b656;padding:0.6em;margin:1em 0}\
.flag{color:#a00;font-weight:bold}\
pre{background:#f6f6f6;padding:0.6em;overflow-x:auto}";

fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    out.push_str("<table>\n<tr>");
    for h in header {
        let _ = write!(out, "<th>{}</th>", escape(h));
    }
    out.push_str("</tr>\n");
    for r in rows {
        out.push_str("<tr>");
        for c in r {
            let _ = write!(out, "<td>{c}</td>");
        }
        out.push_str("</tr>\n");
    }
    out.push_str("</table>\n");
}

fn audit_body(out: &mut String, a: &AuditReport) {
    out.push_str("<h1>Leakage Audit Summary</h1>\n");
    let _ = writeln!(
        out,
        "<p>Task: {} | Outcome: {} | Splitting mode: {}<br>Hash: {} | Folds: {} | Repeats: {}</p>",
        escape(a.task.label()),
        escape(&a.outcome),
        escape(&a.plan_mode),
        escape(&a.plan_hash),
        a.v,
        a.repeats
    );

    let p = &a.permutation;
    out.push_str("<h2>Label-Permutation Association Test</h2>\n");
    table(
        out,
        &["quantity", "value"],
        &[
            vec!["Method".into(), escape(p.method.label())],
            vec!["Metric".into(), escape(&p.metric.to_string())],
            vec!["Observed metric".into(), num(p.observed)],
            vec!["Permuted mean".into(), num(p.perm_mean)],
            vec!["Permuted SD".into(), num(p.perm_sd)],
            vec!["Gap".into(), num(p.gap)],
            vec!["p-value".into(), num(p.p_value)],
            vec!["Permutations".into(), p.b.to_string()],
        ],
    );
    for m in &p.messages {
        let _ = writeln!(out, "<p>{}</p>", escape(m));
    }

    out.push_str("<h2>Batch / Study Association</h2>\n");
    match &a.association {
        Some(assoc) if !assoc.tests.is_empty() => {
            let rows: Vec<Vec<String>> = assoc
                .tests
                .iter()
                .map(|t| {
                    vec![
                        escape(&t.column),
                        t.repeat.to_string(),
                        opt(t.chi2),
                        t.df.to_string(),
                        opt(t.p_value),
                        opt(t.cramers_v),
                        escape(t.note.as_deref().unwrap_or("")),
                    ]
                })
                .collect();
            table(
                out,
                &["column", "repeat", "Chi^2", "df", "p", "Cramer's V", "note"],
                &rows,
            );
        }
        _ => out.push_str("<p>Not requested.</p>\n"),
    }

    out.push_str("<h2>Target Leakage Scan</h2>\n");
    match &a.univariate {
        Some(u) => {
            let _ = writeln!(
                out,
                "<p>Features checked: {} | Flagged (score &gt;= {}): {}</p>",
                u.features.len(),
                num(u.threshold),
                u.n_flagged
            );
            let flagged: Vec<Vec<String>> = u
                .features
                .iter()
                .filter(|f| f.flagged)
                .map(|f| vec![escape(&f.feature), opt(f.auc), num(f.score)])
                .collect();
            if !flagged.is_empty() {
                table(out, &["feature", "AUC", "score"], &flagged);
            }
            if !u.unscanned.is_empty() {
                let _ = writeln!(
                    out,
                    "<p>Not scanned: {}</p>",
                    escape(&u.unscanned.join(", "))
                );
            }
        }
        None => out.push_str("<p>No reference matrix supplied.</p>\n"),
    }

    out.push_str("<h2>Multivariate Target Scan</h2>\n");
    match &a.multivariate {
        Some(m) if m.available => {
            table(
                out,
                &["quantity", "value"],
                &[
                    vec!["Statistic (AUC)".into(), opt(m.statistic)],
                    vec!["p-value".into(), opt(m.p_value)],
                    vec!["Components".into(), m.n_pc.to_string()],
                    vec!["Permutations".into(), m.b.to_string()],
                ],
            );
        }
        Some(m) => {
            let _ = writeln!(
                out,
                "<p>Not available.{}</p>",
                m.reason
                    .as_deref()
                    .map(|r| format!(" {}", escape(r)))
                    .unwrap_or_default()
            );
        }
        None => out.push_str("<p>Not available.</p>\n"),
    }

    out.push_str("<h2>Near-Duplicate Samples</h2>\n");
    match &a.duplicates {
        Some(d) if !d.pairs.is_empty() => {
            let _ = writeln!(
                out,
                "<p>Pairs at similarity &gt;= {}: {} ({} across train/test)</p>",
                num(d.threshold),
                d.pairs.len(),
                d.cross_fold_pairs.len()
            );
            let rows: Vec<Vec<String>> = d
                .pairs
                .iter()
                .map(|pr| {
                    vec![
                        pr.row_a.to_string(),
                        pr.row_b.to_string(),
                        num(pr.similarity),
                    ]
                })
                .collect();
            table(out, &["row a", "row b", "similarity"], &rows);
        }
        Some(_) => out.push_str("<p>No near-duplicates detected.</p>\n"),
        None => out.push_str("<p>No reference matrix supplied.</p>\n"),
    }

    out.push_str("<h2>Mechanism Risk Assessment</h2>\n");
    let rows: Vec<Vec<String>> = a
        .mechanisms
        .rows
        .iter()
        .map(|r| {
            let f = if r.flagged {
                format!("<span class=\"flag\">{}</span>", flag(true))
            } else {
                flag(false).to_string()
            };
            vec![escape(r.mechanism_class.label()), f, escape(&r.evidence)]
        })
        .collect();
    table(out, &["mechanism_class", "flagged", "evidence"], &rows);

    out.push_str("<h2>Interpretation</h2>\n");
    let _ = writeln!(out, "<p>{}</p>", escape(&a.interpretation));
    if !a.messages.is_empty() {
        out.push_str("<h2>Messages</h2>\n<ul>\n");
        for m in &a.messages {
            let _ = writeln!(out, "<li>{}</li>", escape(m));
        }
        out.push_str("</ul>\n");
    }
}

fn ci(c: Option<(f64, f64)>) -> String {
    c.map(|(lo, hi)| format!("[{}, {}]", num(lo), num(hi)))
        .unwrap_or_else(|| "NA".into())
}

fn dlsi_body(out: &mut String, d: &DeltaLsiResult) {
    out.push_str("<h1>Delta LSI Summary</h1>\n");
    if d.tier == Tier::D {
        out.push_str(
            "<div class=\"banner\">Tier D: inference suppressed (unpaired/insufficient repeats). \
             Only point estimates are shown.</div>\n",
        );
    }
    table(
        out,
        &["quantity", "value"],
        &[
            vec!["Metric".into(), escape(&d.metric.to_string())],
            vec!["Exchangeability".into(), escape(d.exchangeability.label())],
            vec!["Inference tier".into(), escape(d.tier.label())],
            vec!["R_eff".into(), d.r_eff.to_string()],
            vec!["Paired".into(), flag(d.paired).into()],
            vec!["Leaky pipeline".into(), num(d.leaky_mean)],
            vec!["Guarded pipeline".into(), num(d.guarded_mean)],
        ],
    );
    out.push_str("<h2>Point estimates (leaky - guarded; positive = leakage inflation)</h2>\n");
    let mut rows = vec![
        vec!["delta_metric".into(), num(d.delta_metric)],
        vec!["delta_lsi".into(), num(d.delta_lsi)],
    ];
    if d.tier != Tier::D {
        rows.push(vec!["delta_metric CI".into(), ci(d.ci_metric)]);
        rows.push(vec!["delta_lsi CI".into(), ci(d.ci_lsi)]);
    }
    table(out, &["estimate", "value"], &rows);
    if d.tier != Tier::D {
        out.push_str("<h2>Hypothesis test</h2>\n");
        let _ = writeln!(
            out,
            "<p>H0: no systematic inflation; paired repeat signs exchangeable.<br>Sign-flip p: {}</p>",
            opt(d.p_signflip)
        );
    }
    let _ = writeln!(
        out,
        "<p>Inference valid: {} (tier {})</p>",
        if d.inference_ok { "YES" } else { "NO" },
        escape(d.tier.label())
    );
    if !d.deltas.is_empty() {
        out.push_str("<h2>Repeat deltas</h2>\n");
        let rows: Vec<Vec<String>> = d
            .deltas
            .iter()
            .enumerate()
            .map(|(i, x)| vec![(i + 1).to_string(), num(*x)])
            .collect();
        table(out, &["repeat", "delta"], &rows);
    }
    if !d.notes.is_empty() {
        out.push_str("<h2>Notes</h2>\n<ul>\n");
        for m in &d.notes {
            let _ = writeln!(out, "<li>{}</li>", escape(m));
        }
        out.push_str("</ul>\n");
    }
}

/// Render a bundle as one HTML document without external assets.
pub fn render_html(bundle: &ReportBundle) -> String {
    let mut out = String::new();
    let title = match bundle.payload {
        ReportPayload::Audit(_) => "Leakage audit report",
        ReportPayload::Dlsi(_) => "Delta LSI report",
    };
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{title}</title>\n<style>{STYLE}</style>\n</head>\n<body>\n"
    );
    match &bundle.payload {
        ReportPayload::Audit(a) => audit_body(&mut out, a),
        ReportPayload::Dlsi(d) => dlsi_body(&mut out, d),
    }
    out.push_str("<h2>Configuration</h2>\n");
    let config = serde_json::to_string_pretty(&bundle.config).unwrap_or_default();
    let _ = writeln!(out, "<pre>{}</pre>", escape(&config));
    let _ = writeln!(
        out,
        "<p>{} {} | schema {} | plan {} | created {}</p>",
        escape(&bundle.tool),
        escape(&bundle.version),
        bundle.schema_version,
        escape(&bundle.plan_hash),
        escape(&bundle.created)
    );
    out.push_str("</body>\n</html>\n");
    out
}
