//! Flat text formats: the `section.key = value` session configuration, the
//! `name = value` gains file and the `name,value` tally file.

use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{
    ClassCounts, GainStatistics, IntensityClass, SessionConfig, SessionTally,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {value}")]
    Value {
        line: usize,
        key: String,
        value: String,
    },
    #[error("missing key `{0}`")]
    Missing(&'static str),
}

/// Every configuration key, in the order [`write_config`] emits them.
pub const CONFIG_KEYS: [&str; 20] = [
    "source.clock_rate_hz",
    "source.mu",
    "source.nu1",
    "source.nu2",
    "source.duty_signal",
    "source.duty_decoy1",
    "source.duty_decoy2",
    "channel.length_km",
    "channel.loss_db_per_km",
    "detector.efficiency",
    "detector.receiver_loss_factor",
    "detector.dark_prob_per_gate",
    "detector.afterpulse_prob",
    "detector.dead_time_gates",
    "detector.gate_width_s",
    "detector.jitter_fwhm_s",
    "detector.misalignment_error",
    "session.duration_s",
    "session.k_sigma",
    "session.f_ec",
];

/// Optional key for the intensity-modulator extinction ratio.
pub const EXTINCTION_KEY: &str = "source.extinction_db";

/// Splits `text` into `(line_number, key, value)` triples, skipping blanks and
/// `#` comments. Keys must be unique.
fn pairs(text: &str, sep: char) -> Result<Vec<(usize, &str, &str)>, ParseError> {
    let mut out: Vec<(usize, &str, &str)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content
            .split_once(sep)
            .ok_or(ParseError::Syntax { line })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(ParseError::Syntax { line });
        }
        if out.iter().any(|(_, seen, _)| *seen == k) {
            return Err(ParseError::Duplicate {
                line,
                key: k.to_string(),
            });
        }
        out.push((line, k, v));
    }
    Ok(out)
}

fn number<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, ParseError> {
    value.parse().map_err(|_| ParseError::Value {
        line,
        key: key.to_string(),
        value: value.to_string(),
    })
}

/// Parses a configuration file. Keys absent from the file keep the values of
/// [`SessionConfig::default`]; the result is not validated.
pub fn parse_config(text: &str) -> Result<SessionConfig, ParseError> {
    let mut cfg = SessionConfig::default();
    for (line, key, value) in pairs(text, '=')? {
        let f = || number::<f64>(line, key, value);
        match key {
            "source.clock_rate_hz" => cfg.source.clock_rate_hz = f()?,
            "source.mu" => cfg.source.mu = f()?,
            "source.nu1" => cfg.source.nu1 = f()?,
            "source.nu2" => cfg.source.nu2 = f()?,
            "source.duty_signal" => cfg.source.duty[0] = f()?,
            "source.duty_decoy1" => cfg.source.duty[1] = f()?,
            "source.duty_decoy2" => cfg.source.duty[2] = f()?,
            EXTINCTION_KEY => cfg.source.extinction_db = Some(f()?),
            "channel.length_km" => cfg.channel.length_km = f()?,
            "channel.loss_db_per_km" => cfg.channel.loss_db_per_km = f()?,
            "detector.efficiency" => cfg.detector.efficiency = f()?,
            "detector.receiver_loss_factor" => cfg.detector.receiver_loss_factor = f()?,
            "detector.dark_prob_per_gate" => cfg.detector.dark_prob_per_gate = f()?,
            "detector.afterpulse_prob" => cfg.detector.afterpulse_prob = f()?,
            "detector.dead_time_gates" => cfg.detector.dead_time_gates = number(line, key, value)?,
            "detector.gate_width_s" => cfg.detector.gate_width_s = f()?,
            "detector.jitter_fwhm_s" => cfg.detector.jitter_fwhm_s = f()?,
            "detector.misalignment_error" => cfg.detector.misalignment_error = f()?,
            "session.duration_s" => cfg.duration_s = f()?,
            "session.k_sigma" => cfg.k_sigma = f()?,
            "session.f_ec" => cfg.f_ec = f()?,
            _ => {
                return Err(ParseError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
    }
    Ok(cfg)
}

/// Writes every key of `cfg`, one per line. `parse_config` reads it back
/// exactly.
pub fn write_config(cfg: &SessionConfig) -> String {
    let s = &cfg.source;
    let d = &cfg.detector;
    let values: [String; 20] = [
        s.clock_rate_hz.to_string(),
        s.mu.to_string(),
        s.nu1.to_string(),
        s.nu2.to_string(),
        s.duty[0].to_string(),
        s.duty[1].to_string(),
        s.duty[2].to_string(),
        cfg.channel.length_km.to_string(),
        cfg.channel.loss_db_per_km.to_string(),
        d.efficiency.to_string(),
        d.receiver_loss_factor.to_string(),
        d.dark_prob_per_gate.to_string(),
        d.afterpulse_prob.to_string(),
        d.dead_time_gates.to_string(),
        d.gate_width_s.to_string(),
        d.jitter_fwhm_s.to_string(),
        d.misalignment_error.to_string(),
        cfg.duration_s.to_string(),
        cfg.k_sigma.to_string(),
        cfg.f_ec.to_string(),
    ];
    let mut out = String::new();
    for (k, v) in CONFIG_KEYS.iter().zip(values) {
        let _ = writeln!(out, "{k} = {v}");
        if *k == "source.duty_decoy2" {
            if let Some(ext) = s.extinction_db {
                let _ = writeln!(out, "{EXTINCTION_KEY} = {ext}");
            }
        }
    }
    out
}

/// Parses a gains file. The four central values are required; deviations
/// default to zero.
pub fn parse_gains(text: &str) -> Result<GainStatistics, ParseError> {
    let mut central: [Option<f64>; 4] = [None; 4];
    let mut dev = [0.0; 4];
    const NAMES: [&str; 4] = ["q_mu", "q_nu1", "q_nu2", "eps_mu"];
    for (line, key, value) in pairs(text, '=')? {
        let v: f64 = number(line, key, value)?;
        if !v.is_finite() {
            return Err(ParseError::Value {
                line,
                key: key.to_string(),
                value: value.to_string(),
            });
        }
        if let Some(i) = NAMES.iter().position(|n| *n == key) {
            central[i] = Some(v);
        } else if let Some(i) = key
            .strip_prefix("dev_")
            .and_then(|rest| NAMES.iter().position(|n| *n == rest))
        {
            dev[i] = v;
        } else {
            return Err(ParseError::UnknownKey {
                line,
                key: key.to_string(),
            });
        }
    }
    let mut c = [0.0; 4];
    for i in 0..4 {
        c[i] = central[i].ok_or(ParseError::Missing(NAMES[i]))?;
    }
    Ok(GainStatistics {
        q_mu: c[0],
        q_nu1: c[1],
        q_nu2: c[2],
        eps_mu: c[3],
        dev_q_mu: dev[0],
        dev_q_nu1: dev[1],
        dev_q_nu2: dev[2],
        dev_eps_mu: dev[3],
    })
}

const COUNT_FIELDS: [&str; 5] = ["pulses_sent", "clicks", "sifted", "disclosed", "errors"];

fn count_field(c: &mut ClassCounts, field: usize) -> &mut u64 {
    match field {
        0 => &mut c.pulses_sent,
        1 => &mut c.clicks,
        2 => &mut c.sifted,
        3 => &mut c.disclosed,
        _ => &mut c.errors,
    }
}

/// `name,value` lines: `<class>.<field>` counts followed by `duration_s`.
pub fn write_tally(tally: &SessionTally) -> String {
    let mut out = String::new();
    for class in IntensityClass::ALL {
        let mut c = *tally.class(class);
        for (i, field) in COUNT_FIELDS.iter().enumerate() {
            let _ = writeln!(out, "{class}.{field},{}", count_field(&mut c, i));
        }
    }
    let _ = writeln!(out, "duration_s,{}", tally.duration_s);
    out
}

pub fn parse_tally(text: &str) -> Result<SessionTally, ParseError> {
    let mut tally = SessionTally::default();
    let mut seen_duration = false;
    for (line, key, value) in pairs(text, ',')? {
        if key == "duration_s" {
            tally.duration_s = number(line, key, value)?;
            seen_duration = true;
            continue;
        }
        let slot = key.split_once('.').and_then(|(class, field)| {
            let class = IntensityClass::ALL.into_iter().find(|c| c.name() == class)?;
            let field = COUNT_FIELDS.iter().position(|f| *f == field)?;
            Some((class, field))
        });
        let Some((class, field)) = slot else {
            return Err(ParseError::UnknownKey {
                line,
                key: key.to_string(),
            });
        };
        *count_field(tally.class_mut(class), field) = number(line, key, value)?;
    }
    if !seen_duration {
        return Err(ParseError::Missing("duration_s"));
    }
    Ok(tally)
}
