//! Boundary-indicator heatmaps for the terminal and for HTML.
//!
//! Each token is shaded on a linear red-to-green scale by its indicator
//! value, annotated with the value to two decimals, and followed by a
//! boundary mark when the value exceeds [`BOUNDARY_THRESHOLD`].

use std::fmt::Write;

pub const BOUNDARY_THRESHOLD: f64 = 0.9;
pub const BOUNDARY_MARK: &str = "\u{2193}";
pub const LOW_RGB: (u8, u8, u8) = (220, 50, 50);
pub const HIGH_RGB: (u8, u8, u8) = (50, 180, 50);

/// Color for an indicator value, clamped to `[0, 1]`.
pub fn color(r: f64) -> (u8, u8, u8) {
    let r = r.clamp(0.0, 1.0);
    let lerp = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * r).round() as u8;
    (lerp(LOW_RGB.0, HIGH_RGB.0), lerp(LOW_RGB.1, HIGH_RGB.1), lerp(LOW_RGB.2, HIGH_RGB.2))
}

pub fn is_boundary(r: f64) -> bool {
    r > BOUNDARY_THRESHOLD
}

fn label(token: &str, r: f64) -> String {
    let mark = if is_boundary(r) { BOUNDARY_MARK } else { "" };
    format!("{token}({r:.2}){mark}")
}

/// One line per sentence, tokens on 24-bit background colors.
pub fn render_ansi(sentences: &[(Vec<String>, Vec<f64>)]) -> String {
    let mut out = String::new();
    for (tokens, rs) in sentences {
        let cells: Vec<String> = tokens
            .iter()
            .zip(rs)
            .map(|(t, &r)| {
                let (red, green, blue) = color(r);
                format!("\x1b[48;2;{red};{green};{blue}m\x1b[38;2;255;255;255m{}\x1b[0m", label(t, r))
            })
            .collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// A self-contained HTML page with one row per sentence.
pub fn render_html(sentences: &[(Vec<String>, Vec<f64>)]) -> String {
    let mut out = String::from(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Chunk boundaries</title>\n<style>\n\
         body { font-family: sans-serif; }\n\
         .s { margin: 0.6em 0; }\n\
         .t { display: inline-block; padding: 0.15em 0.35em; margin: 0 0.1em; color: #fff; border-radius: 3px; text-align: center; }\n\
         .t sub { display: block; font-size: 0.7em; }\n\
         </style>\n</head>\n<body>\n",
    );
    for (tokens, rs) in sentences {
        out.push_str("<div class=\"s\">");
        for (t, &r) in tokens.iter().zip(rs) {
            let (red, green, blue) = color(r);
            let mark = if is_boundary(r) { BOUNDARY_MARK } else { "" };
            write!(
                out,
                "<span class=\"t\" style=\"background: rgb({red},{green},{blue})\">{}{mark}<sub>{r:.2}</sub></span>",
                escape(t)
            )
            .unwrap();
        }
        out.push_str("</div>\n");
    }
    out.push_str("</body>\n</html>\n");
    out
}
