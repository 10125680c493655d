//! Terminal chat loop: each line is an utterance, `me:` or `them:` selects
//! the speaker, and per-sense confidence bars are printed after every line.

use std::io::{BufRead, Write};

use anyhow::Result;
use senseslam::{ConfidenceReport, Role, Session, Utterance};

const BAR_WIDTH: usize = 30;

/// Splits `me: text` / `them: text`; unprefixed lines come from the other
/// speaker.
pub fn parse_line(line: &str) -> (Role, &str) {
    let line = line.trim();
    if let Some(rest) = line.strip_prefix("me:") {
        (Role::Own, rest.trim())
    } else if let Some(rest) = line.strip_prefix("them:") {
        (Role::Other, rest.trim())
    } else {
        (Role::Other, line)
    }
}

/// Renders one bar per sense, sorted by sense id.
pub fn render_bars(report: &ConfidenceReport) -> String {
    let width = report.per_sense.keys().map(|k| k.len()).max().unwrap_or(0);
    let mut out = format!("{}:\n", report.label);
    for (sense, &c) in &report.per_sense {
        let filled = (c.clamp(0.0, 1.0) * BAR_WIDTH as f64).round() as usize;
        out.push_str(&format!(
            "  {sense:<width$} {}{} {:5.1}%\n",
            "#".repeat(filled),
            ".".repeat(BAR_WIDTH - filled),
            100.0 * c
        ));
    }
    out
}

/// Runs until end of input. Errors on a line are reported and the loop
/// continues; only I/O failures end it early.
pub fn run<R: BufRead, W: Write>(session: &mut Session, input: R, mut out: W) -> Result<()> {
    let mut t = session.last_t().map_or(0, |last| last + 1);
    for line in input.lines() {
        let line = line?;
        let (role, text) = parse_line(&line);
        if text.is_empty() {
            continue;
        }
        let utt = Utterance::from_text(role, text, t);
        match session.process_turn(&utt) {
            Ok(()) => {
                t += 1;
                for label in session.targets().to_vec() {
                    writeln!(
                        out,
                        "{}",
                        render_bars(&session.confidence(&label)?).trim_end()
                    )?;
                }
            }
            Err(e) => writeln!(out, "error: {e}")?,
        }
        out.flush()?;
    }
    Ok(())
}
