//! Flat `key = value` overrides for scenario and analysis settings.
//!
//! Blank lines and lines starting with `#` are ignored. Keys:
//!
//! | key | meaning |
//! |---|---|
//! | `beta` | IE slope |
//! | `alpha1`, `alpha2`, `alpha3` | IE thresholds at weeks 2, 4, 6 (mg/L) |
//! | `beta_scale`, `alpha_shift` | multiplier on the slope, shift on every threshold |
//! | `ie_scope` | `pending` or `always` |
//! | `cmax_driver` | `peak` or `dose` |
//! | `mu_cl`, `mu_v`, `omega_cl`, `omega_v`, `xi` | population PK parameters |
//! | `mm_vmax`, `mm_km`, `mm_v`, `mm_step` | saturable-elimination model and its RK4 step |
//! | `ipw_cap` | weight cap quantile in (0, 1], or `none` |
//! | `ie_source` | `true` or `fitted` |

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::report::AnalysisOptions;
use crate::trial::Scenario;

/// Parses the file into `(line number, key, value)` entries.
pub fn parse(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            line: i + 1,
            msg: format!("expected key = value, got '{line}'"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config { line: i + 1, msg: "empty key or value".into() });
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Applies the overrides in file order.
pub fn apply(text: &str, scenario: &mut Scenario, opts: &mut AnalysisOptions) -> Result<()> {
    for (line, key, value) in parse(text)? {
        let err = |msg: String| Error::Config { line, msg };
        let num = || value.parse::<f64>().map_err(|_| err(format!("'{key}' needs a number, got '{value}'")));
        let parsed = |e: Error| err(e.to_string());
        match key.as_str() {
            "beta" => scenario.beta = num()?,
            "alpha1" => scenario.alphas[0] = num()?,
            "alpha2" => scenario.alphas[1] = num()?,
            "alpha3" => scenario.alphas[2] = num()?,
            "beta_scale" => scenario.beta_scale = num()?,
            "alpha_shift" => scenario.alpha_shift = num()?,
            "ie_scope" => scenario.ie_scope = FromStr::from_str(&value).map_err(parsed)?,
            "cmax_driver" => scenario.cmax_driver = FromStr::from_str(&value).map_err(parsed)?,
            "mu_cl" => scenario.pop.mu_cl = num()?,
            "mu_v" => scenario.pop.mu_v = num()?,
            "omega_cl" => scenario.pop.omega_cl = num()?,
            "omega_v" => scenario.pop.omega_v = num()?,
            "xi" => scenario.pop.xi = num()?,
            "mm_vmax" => scenario.mm.vmax = num()?,
            "mm_km" => scenario.mm.km = num()?,
            "mm_v" => scenario.mm.v = num()?,
            "mm_step" => scenario.mm_step = num()?,
            "ipw_cap" if value == "none" => opts.ipw_cap = None,
            "ipw_cap" => opts.ipw_cap = Some(num()?),
            "ie_source" => opts.ie_source = Some(FromStr::from_str(&value).map_err(parsed)?),
            _ => return Err(err(format!("unknown key '{key}'"))),
        }
    }
    scenario.validate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ipw::IeSource;
    use crate::trial::{IeScope, Variant};

    #[test]
    fn applies_known_keys() {
        let mut s = Scenario::new(Variant::Main);
        let mut o = AnalysisOptions::default();
        let text = "# comment\n\nbeta = 0\nalpha3=120\nxi = 0.1\nipw_cap = 0.995\nie_source = fitted\nie_scope = always\n";
        apply(text, &mut s, &mut o).unwrap();
        assert_eq!(s.beta, 0.0);
        assert_eq!(s.alphas, [15.0, 40.0, 120.0]);
        assert_eq!(s.pop.xi, 0.1);
        assert_eq!(s.ie_scope, IeScope::Always);
        assert_eq!(o.ipw_cap, Some(0.995));
        assert_eq!(o.ie_source, Some(IeSource::Fitted));
    }

    #[test]
    fn reports_line_of_bad_entry() {
        let mut s = Scenario::new(Variant::Main);
        let mut o = AnalysisOptions::default();
        assert!(matches!(apply("beta = 1\nfoo = 2\n", &mut s, &mut o), Err(Error::Config { line: 2, .. })));
        assert!(matches!(apply("beta\n", &mut s, &mut o), Err(Error::Config { line: 1, .. })));
        assert!(matches!(apply("xi = abc\n", &mut s, &mut o), Err(Error::Config { line: 1, .. })));
        assert!(apply("alpha1 = 50\n", &mut s, &mut o).is_err());
    }
}
