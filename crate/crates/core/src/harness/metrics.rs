//! CSV tables of round metrics and per-arm summaries.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::runner::{ArmResult, RoundMetrics, Summary};

pub const HEADER: [&str; 8] = ["repeat", "round", "accuracy", "loss", "delay_s", "abandoned", "accepted", "weights"];

/// `%.9g`-style formatting: 9 significant digits, trailing zeros trimmed,
/// scientific notation outside `[1e-4, 1e9)`.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim(format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa.to_string()), exp.abs())
    }
}

fn row(m: &RoundMetrics) -> [String; 8] {
    [
        m.repeat.to_string(),
        m.round.to_string(),
        m.accuracy.to_string(),
        m.loss.to_string(),
        m.delay_s.map(|d| d.to_string()).unwrap_or_default(),
        m.abandoned.to_string(),
        m.accepted.iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
        m.weights.iter().map(|(id, w)| format!("{id}={}", format_sig9(*w))).collect::<Vec<_>>().join(";"),
    ]
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

/// Metrics in the fixed schema.
pub fn write_metrics<'a, W: Write>(out: W, metrics: impl IntoIterator<Item = &'a RoundMetrics>) -> csv::Result<()> {
    let mut w = writer(out);
    w.write_record(HEADER)?;
    for m in metrics {
        w.write_record(row(m))?;
    }
    w.flush()?;
    Ok(())
}

pub fn metrics_to_string<'a>(metrics: impl IntoIterator<Item = &'a RoundMetrics>) -> String {
    let mut buf = Vec::new();
    write_metrics(&mut buf, metrics).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

pub fn emit_csv<'a>(metrics: impl IntoIterator<Item = &'a RoundMetrics>, path: &Path) -> Result<()> {
    std::fs::write(path, metrics_to_string(metrics)).map_err(|e| Error::io(path, e))
}

/// Several arms in one table, with a leading `arm` column.
pub fn combined_to_string(arms: &[ArmResult]) -> String {
    let mut buf = Vec::new();
    {
        let mut w = writer(&mut buf);
        let mut header = vec!["arm"];
        header.extend(HEADER);
        w.write_record(&header).expect("writing to memory");
        for arm in arms {
            for m in arm.metrics() {
                let mut r = vec![arm.label.clone()];
                r.extend(row(m));
                w.write_record(&r).expect("writing to memory");
            }
        }
        w.flush().expect("writing to memory");
    }
    String::from_utf8(buf).expect("ascii output")
}

fn parse_err(line: u64, msg: impl std::fmt::Display) -> Error {
    Error::io("<csv>", std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {line}: {msg}")))
}

fn parse_row(rec: &csv::StringRecord, offset: usize, line: u64) -> Result<RoundMetrics> {
    let f = |i: usize| rec.get(offset + i).ok_or_else(|| parse_err(line, "missing column"));
    let num = |i: usize| -> Result<f64> { f(i)?.parse().map_err(|e| parse_err(line, e)) };
    let int = |s: &str| -> Result<usize> { s.parse().map_err(|e| parse_err(line, e)) };
    let split = |s: &str| -> Vec<String> {
        if s.is_empty() {
            Vec::new()
        } else {
            s.split(';').map(str::to_string).collect()
        }
    };
    let weights = split(f(7)?)
        .iter()
        .map(|kv| {
            let (id, w) = kv.split_once('=').ok_or_else(|| parse_err(line, "weight missing `=`"))?;
            Ok((int(id)?, w.parse::<f64>().map_err(|e| parse_err(line, e))?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RoundMetrics {
        repeat: int(f(0)?)?,
        round: int(f(1)?)?,
        accuracy: num(2)?,
        loss: num(3)?,
        delay_s: match f(4)? {
            "" => None,
            _ => Some(num(4)?),
        },
        abandoned: f(5)?.parse().map_err(|e| parse_err(line, e))?,
        accepted: split(f(6)?).iter().map(|s| int(s)).collect::<Result<_>>()?,
        weights,
    })
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes())
}

/// Inverse of [`metrics_to_string`]. Weights come back at 9 significant digits.
pub fn parse_metrics(text: &str) -> Result<Vec<RoundMetrics>> {
    let mut r = reader(text);
    let header = r.headers().map_err(|e| parse_err(1, e))?;
    if header.iter().ne(HEADER) {
        return Err(parse_err(1, "unexpected header"));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| parse_row(&rec.map_err(|e| parse_err(i as u64 + 2, e))?, 0, i as u64 + 2))
        .collect()
}

/// Inverse of [`combined_to_string`]: `(arm, metrics)` in file order.
pub fn parse_combined(text: &str) -> Result<Vec<(String, RoundMetrics)>> {
    let mut r = reader(text);
    let header = r.headers().map_err(|e| parse_err(1, e))?;
    if header.get(0) != Some("arm") || header.iter().skip(1).ne(HEADER) {
        return Err(parse_err(1, "unexpected header"));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| parse_err(i as u64 + 2, e))?;
            Ok((rec[0].to_string(), parse_row(&rec, 1, i as u64 + 2)?))
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<RoundMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text)
}

/// One line per arm: final accuracy, failure flag and delay to target.
pub fn summary_to_string(summaries: &[&Summary]) -> String {
    let mut buf = Vec::new();
    {
        let mut w = writer(&mut buf);
        w.write_record([
            "arm",
            "repeats",
            "final_accuracy_mean",
            "final_accuracy_std",
            "failure",
            "failed_repeats",
            "total_delay_mean_s",
            "target_reached",
        ])
        .expect("writing to memory");
        for s in summaries {
            w.write_record([
                s.label.clone(),
                s.final_accuracy.len().to_string(),
                s.mean_final_accuracy.to_string(),
                s.std_final_accuracy.to_string(),
                s.failure.to_string(),
                s.failed_repeats.to_string(),
                s.mean_total_delay.map(|d| d.to_string()).unwrap_or_default(),
                s.target_reached().to_string(),
            ])
            .expect("writing to memory");
        }
        w.flush().expect("writing to memory");
    }
    String::from_utf8(buf).expect("ascii output")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> RoundMetrics {
        RoundMetrics {
            repeat: 0,
            round: 3,
            accuracy: 0.9125,
            loss: 0.25,
            delay_s: Some(1.5),
            abandoned: false,
            accepted: vec![0, 2, 5],
            weights: vec![(0, 0.2), (2, 1.0 / 3.0), (5, 0.4666666666666667)],
        }
    }

    #[test]
    fn empty_table_is_header_only() {
        assert_eq!(metrics_to_string([]), "repeat,round,accuracy,loss,delay_s,abandoned,accepted,weights\n");
    }

    #[test]
    fn one_row_exact_bytes() {
        let m = fixture();
        assert_eq!(
            metrics_to_string([&m]),
            "repeat,round,accuracy,loss,delay_s,abandoned,accepted,weights\n\
             0,3,0.9125,0.25,1.5,false,0;2;5,0=0.2;2=0.333333333;5=0.466666667\n"
        );
        let abandoned = RoundMetrics { delay_s: None, abandoned: true, accepted: vec![], weights: vec![], ..m };
        assert!(metrics_to_string([&abandoned]).ends_with("0,3,0.9125,0.25,,true,,\n"));
    }

    #[test]
    fn reload_reproduces_table() {
        let mut rows = vec![fixture()];
        rows.push(RoundMetrics { round: 4, delay_s: None, abandoned: true, accepted: vec![], weights: vec![], ..fixture() });
        let text = metrics_to_string(&rows);
        let back = parse_metrics(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1], rows[1]);
        assert_eq!(back[0].accepted, rows[0].accepted);
        assert_eq!(back[0].weights[1], (2, 0.333333333));
        assert_eq!(metrics_to_string(&back), text);
    }

    #[test]
    fn sig9_matches_printf_g() {
        let cases = [
            (0.5, "0.5"),
            (1.0, "1"),
            (1.0 / 3.0, "0.333333333"),
            (2.0 / 3.0, "0.666666667"),
            (1e-7, "1e-07"),
            (1e-5, "1e-05"),
            (1.23456789012e-5, "1.23456789e-05"),
            (0.000123456789012, "0.000123456789"),
            (123456789.0, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (0.999999999949, "1"),
            (0.0, "0"),
        ];
        for (x, want) in cases {
            assert_eq!(format_sig9(x), want, "{x}");
        }
    }

    #[test]
    fn combined_round_trip() {
        let arm = ArmResult {
            label: "a".into(),
            config: Default::default(),
            repeats: vec![crate::harness::runner::RepeatResult { repeat: 0, malicious: vec![], rounds: vec![fixture()] }],
            summary: Summary::from_repeats("a", &[], 0.1, 0.9),
        };
        let text = combined_to_string(std::slice::from_ref(&arm));
        assert!(text.starts_with("arm,repeat,round,"));
        let back = parse_combined(&text).unwrap();
        assert_eq!(back[0].0, "a");
        assert_eq!(back[0].1.round, 3);
    }
}
