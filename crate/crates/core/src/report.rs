//! CSV persistence for metrics and loss surfaces.

use std::io::{Read, Write};

use crate::error::{FlocoError, Result};
use crate::metrics::{RoundMetrics, SurfacePoint};

pub const METRICS_HEADER: [&str; 7] = [
    "round",
    "global_acc",
    "mean_local_acc",
    "global_ece",
    "mean_local_ece",
    "total_grad_variance",
    "worst5_local_acc",
];

/// Formats like C's `%.9g`: nine significant digits, trailing zeros removed,
/// scientific notation outside `[1e-4, 1e9)`.
pub fn format_sig9(v: f64) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_string()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[RoundMetrics]) -> Result<()> {
    let mut w = writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.round.to_string(),
            format_sig9(r.global_acc),
            format_sig9(r.mean_local_acc),
            format_sig9(r.global_ece),
            format_sig9(r.mean_local_ece),
            format_sig9(r.total_grad_variance),
            format_sig9(r.worst5_local_acc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<RoundMetrics>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(FlocoError::Parse(format!(
            "unexpected metrics header `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        let field = |i: usize| -> Result<f64> {
            record[i].parse().map_err(|_| {
                FlocoError::Parse(format!(
                    "bad number `{}` in column {}",
                    &record[i], METRICS_HEADER[i]
                ))
            })
        };
        rows.push(RoundMetrics {
            round: record[0]
                .parse()
                .map_err(|_| FlocoError::Parse(format!("bad round `{}`", &record[0])))?,
            global_acc: field(1)?,
            mean_local_acc: field(2)?,
            global_ece: field(3)?,
            mean_local_ece: field(4)?,
            total_grad_variance: field(5)?,
            worst5_local_acc: field(6)?,
        });
    }
    Ok(rows)
}

/// Columns `alpha_0..alpha_M, loss, accuracy, tag`.
pub fn write_surface_csv<W: Write>(out: W, points: &[SurfacePoint]) -> Result<()> {
    let len = points.first().map_or(0, |p| p.alpha.len());
    if points.iter().any(|p| p.alpha.len() != len) {
        return Err(FlocoError::dims("surface points have different dimensions"));
    }
    let mut w = writer(out);
    let mut header: Vec<String> = (0..len).map(|m| format!("alpha_{m}")).collect();
    header.extend(["loss", "accuracy", "tag"].map(String::from));
    w.write_record(&header)?;
    for p in points {
        let mut row: Vec<String> = p.alpha.coords().iter().map(|&a| format_sig9(a)).collect();
        row.push(format_sig9(p.loss));
        row.push(format_sig9(p.accuracy));
        row.push(p.tag.as_str().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_matches_printf() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.5, "0.5"),
            (1.0 / 3.0, "0.333333333"),
            (2.0 / 3.0, "0.666666667"),
            (123456789.0, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-2.5, "-2.5"),
            (99999999.94, "99999999.9"),
            (99999999.95, "100000000"),
            (999999999.5, "1e+09"),
        ];
        for (v, want) in cases {
            assert_eq!(format_sig9(v), want, "{v}");
        }
        assert_eq!(format_sig9(f64::NAN), "NaN");
    }

    #[test]
    fn metrics_round_trip() {
        let rows = vec![RoundMetrics {
            round: 10,
            global_acc: 0.5,
            mean_local_acc: 0.625,
            global_ece: 0.125,
            mean_local_ece: 0.0625,
            total_grad_variance: f64::NAN,
            worst5_local_acc: 0.25,
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "round,global_acc,mean_local_acc,global_ece,mean_local_ece,total_grad_variance,worst5_local_acc\n\
             10,0.5,0.625,0.125,0.0625,NaN,0.25\n"
        );
        let back = read_metrics_csv(buf.as_slice()).unwrap();
        assert_eq!(back[0].round, 10);
        assert_eq!(back[0].mean_local_acc, 0.625);
        assert!(back[0].total_grad_variance.is_nan());
    }
}
