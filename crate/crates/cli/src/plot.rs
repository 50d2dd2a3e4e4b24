//! Report rendering: a forget-quality versus model-utility trade-off plot
//! written as plain SVG, plus a markdown summary table. No plotting
//! dependency; the CSV stays the canonical record for external tools.

use std::path::Path;
use tif_core::error::{Error, Result};

/// One row of the evaluation CSV, keyed by column name.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub checkpoint: String,
    pub forget_quality: f64,
    pub model_utility: f64,
    pub privleak: f64,
    pub gw_ce: f64,
    pub kl_retain: f64,
}

pub fn read_report_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingArtifact(format!("report CSV {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        msg: "empty report CSV".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    let idx = |name: &str| {
        cols.iter().position(|c| *c == name).ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("missing column {name:?}"),
        })
    };
    let (i_ck, i_fq, i_mu) = (idx("checkpoint")?, idx("forget_quality")?, idx("model_utility")?);
    let (i_pl, i_gw, i_kl) = (idx("privleak")?, idx("gw_ce")?, idx("kl_retain")?);
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let num = |i: usize| -> Result<f64> {
            fields
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse { line: n + 2, msg: format!("bad field {i}") })
        };
        rows.push(ReportRow {
            checkpoint: fields.get(i_ck).unwrap_or(&"").to_string(),
            forget_quality: num(i_fq)?,
            model_utility: num(i_mu)?,
            privleak: num(i_pl)?,
            gw_ce: num(i_gw)?,
            kl_retain: num(i_kl)?,
        });
    }
    Ok(rows)
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;

/// Forget quality (log scale, clamped below at 1e-10) on the x axis,
/// model utility on the y axis; checkpoints joined in epoch order.
pub fn tradeoff_svg(rows: &[ReportRow]) -> String {
    let floor = 1e-10f64;
    let xs: Vec<f64> = rows.iter().map(|r| r.forget_quality.max(floor).log10()).collect();
    let (x_min, x_max) = (floor.log10(), 0.0f64);
    let x_of = |x: f64| MARGIN + (x - x_min) / (x_max - x_min) * (W - 2.0 * MARGIN);
    let y_of = |u: f64| H - MARGIN - u.clamp(0.0, 1.0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // axes
    s.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">\
         forget quality (KS p, log10)</text>\n",
        W / 2.0,
        H - 15.0
    ));
    s.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\" \
         transform=\"rotate(-90 18 {})\">model utility</text>\n",
        H / 2.0,
        H / 2.0
    ));
    // x ticks every 2 decades, y ticks every 0.2
    let mut tick = x_min;
    while tick <= x_max + 1e-9 {
        let px = x_of(tick);
        s.push_str(&format!(
            "<line x1=\"{px}\" y1=\"{}\" x2=\"{px}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{px}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">1e{}</text>\n",
            H - MARGIN,
            H - MARGIN + 5.0,
            H - MARGIN + 20.0,
            tick as i64
        ));
        tick += 2.0;
    }
    for k in 0..=5 {
        let u = k as f64 * 0.2;
        let py = y_of(u);
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{py}\" x2=\"{}\" y2=\"{py}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"11\">{u:.1}</text>\n",
            MARGIN - 5.0,
            MARGIN,
            MARGIN - 8.0,
            py + 4.0
        ));
    }
    // significance threshold p = 0.05
    let px = x_of(0.05f64.log10());
    s.push_str(&format!(
        "<line x1=\"{px}\" y1=\"{}\" x2=\"{px}\" y2=\"{}\" stroke=\"gray\" \
         stroke-dasharray=\"4 3\"/>\n\
         <text x=\"{px}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\" \
         fill=\"gray\">p=0.05</text>\n",
        MARGIN,
        H - MARGIN,
        MARGIN - 8.0
    ));
    // trajectory
    if !rows.is_empty() {
        let pts: Vec<String> = rows
            .iter()
            .zip(&xs)
            .map(|(r, &x)| format!("{:.2},{:.2}", x_of(x), y_of(r.model_utility)))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
        for (r, &x) in rows.iter().zip(&xs) {
            let (cx, cy) = (x_of(x), y_of(r.model_utility));
            s.push_str(&format!(
                "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"4\" fill=\"steelblue\"/>\n\
                 <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">{}</text>\n",
                cx + 6.0,
                cy - 6.0,
                r.checkpoint
            ));
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn summary_table(rows: &[ReportRow]) -> String {
    let mut s = String::from(
        "| checkpoint | forget quality | model utility | privleak | gw_ce | kl_retain |\n\
         |---|---|---|---|---|---|\n",
    );
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.3e} | {:.4} | {:.2} | {:.4} | {:.4} |\n",
            r.checkpoint, r.forget_quality, r.model_utility, r.privleak, r.gw_ce, r.kl_retain
        ));
    }
    s
}
