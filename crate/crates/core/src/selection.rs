//! Selection rules over per-pair scores and the overlap between selections.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::PreferencePair;
use crate::error::{Error, Result};
use crate::rng::derived_rng;
use crate::stats::{band_mask, check_band};

/// Percentile band `(lo, hi)`, `0 <= lo < hi <= 100`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionBand {
    pub lo: f64,
    pub hi: f64,
}

impl SelectionBand {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        check_band(lo, hi)?;
        Ok(Self { lo, hi })
    }

    pub fn full() -> Self {
        Self { lo: 0.0, hi: 100.0 }
    }
}

impl Default for SelectionBand {
    fn default() -> Self {
        Self { lo: 10.0, hi: 90.0 }
    }
}

impl std::str::FromStr for SelectionBand {
    type Err = Error;

    /// Parses `"lo,hi"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("expected `lo,hi`, got `{s}`"));
        let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
        let lo = lo.trim().parse().map_err(|_| bad())?;
        let hi = hi.trim().parse().map_err(|_| bad())?;
        Self::new(lo, hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Tif,
    LossDiffIrm,
    LossDiffOnly,
    IrmOnly,
    Random,
    ScoreMargin,
    OracleMargin,
    Full,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Tif => "tif",
            Method::LossDiffIrm => "lossdiff-irm",
            Method::LossDiffOnly => "lossdiff",
            Method::IrmOnly => "irm",
            Method::Random => "random",
            Method::ScoreMargin => "score-margin",
            Method::OracleMargin => "oracle-margin",
            Method::Full => "full",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Method::Tif,
            Method::LossDiffIrm,
            Method::LossDiffOnly,
            Method::IrmOnly,
            Method::Random,
            Method::ScoreMargin,
            Method::OracleMargin,
            Method::Full,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown selection method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask {
    pub pair_ids: Vec<String>,
    pub selected: Vec<bool>,
    pub method: Method,
}

impl SelectionMask {
    pub fn new(pair_ids: Vec<String>, selected: Vec<bool>, method: Method) -> Result<Self> {
        if pair_ids.len() != selected.len() {
            return Err(Error::LengthMismatch {
                expected: pair_ids.len(),
                actual: selected.len(),
            });
        }
        let mut seen = HashSet::new();
        for id in &pair_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            pair_ids,
            selected,
            method,
        })
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.len() as f64
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.selected[i]).collect()
    }

    /// Pairs whose mask bit is `keep`, in order.
    pub fn pick<'a>(&self, pairs: &'a [PreferencePair], keep: bool) -> Vec<PreferencePair> {
        pairs
            .iter()
            .zip(&self.selected)
            .filter(|(_, &s)| s == keep)
            .map(|(p, _)| p.clone())
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["pair_id", "method", "selected"])?;
        for (id, s) in self.pair_ids.iter().zip(&self.selected) {
            w.write_record([id.as_str(), self.method.as_str(), if *s { "1" } else { "0" }])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path)?;
        let (mut ids, mut selected, mut method) = (Vec::new(), Vec::new(), None);
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message,
            };
            if rec.len() != 3 {
                return Err(parse_err(format!("expected 3 fields, got {}", rec.len())));
            }
            let m: Method = rec[1].parse().map_err(|e: Error| parse_err(e.to_string()))?;
            if *method.get_or_insert(m) != m {
                return Err(parse_err("mixed methods in one mask".into()));
            }
            ids.push(rec[0].to_string());
            selected.push(match &rec[2] {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(parse_err(format!("bad selected flag `{other}`"))),
            });
        }
        Self::new(ids, selected, method.unwrap_or(Method::Full))
    }
}

fn check_ids(ids: &[String], n: usize) -> Result<()> {
    if ids.len() != n {
        return Err(Error::LengthMismatch {
            expected: ids.len(),
            actual: n,
        });
    }
    Ok(())
}

/// Medium-band mask on one score list.
pub fn band_select(ids: &[String], scores: &[f64], band: &SelectionBand, method: Method) -> Result<SelectionMask> {
    check_ids(ids, scores.len())?;
    let mask = band_mask(scores, band.lo, band.hi)?;
    SelectionMask::new(ids.to_vec(), mask, method)
}

/// Pairs inside both the LossDiff band `xi` and the IRM band `tau`.
pub fn lossdiff_irm_select(
    ids: &[String],
    lossdiffs: &[f64],
    irms: &[f64],
    xi: &SelectionBand,
    tau: &SelectionBand,
) -> Result<SelectionMask> {
    if lossdiffs.len() != irms.len() {
        return Err(Error::LengthMismatch {
            expected: lossdiffs.len(),
            actual: irms.len(),
        });
    }
    check_ids(ids, lossdiffs.len())?;
    let by_ld = band_mask(lossdiffs, xi.lo, xi.hi)?;
    let by_irm = band_mask(irms, tau.lo, tau.hi)?;
    let both = by_ld.iter().zip(&by_irm).map(|(a, b)| *a && *b).collect();
    SelectionMask::new(ids.to_vec(), both, Method::LossDiffIrm)
}

/// Centred band `(50 − w/2, 50 + w/2)` whose selection size is closest to
/// `target` (ties go to the narrower band).
pub fn matched_band(scores: &[f64], target: usize) -> Result<SelectionBand> {
    let count = |w: f64| -> Result<usize> {
        let b = centred(w);
        Ok(band_mask(scores, b.lo, b.hi)?.iter().filter(|&&s| s).count())
    };
    let (mut lo, mut hi) = (0.0f64, 100.0f64);
    if count(hi)? <= target {
        return Ok(centred(hi));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if count(mid)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (c_lo, c_hi) = (count(lo)?, count(hi)?);
    let w = if target.abs_diff(c_lo) <= target.abs_diff(c_hi) && lo > 0.0 { lo } else { hi };
    Ok(centred(w))
}

fn centred(width: f64) -> SelectionBand {
    let half = width.clamp(1e-12, 100.0) / 2.0;
    SelectionBand {
        lo: (50.0 - half).max(0.0),
        hi: (50.0 + half).min(100.0),
    }
}

/// External-signal baselines: uniform random, or top fraction by margin.
/// `ScoreMargin` ranks by `score_chosen − score_rejected`; `OracleMargin` by
/// the planted margin signed by whether the stored label is correct.
pub fn baseline_select(
    method: Method,
    pairs: &[PreferencePair],
    target_fraction: f64,
    seed: u64,
) -> Result<SelectionMask> {
    if !(0.0..=1.0).contains(&target_fraction) {
        return Err(Error::InvalidArgument(format!(
            "target fraction must be in [0, 1], got {target_fraction}"
        )));
    }
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let n = pairs.len();
    let k = (n as f64 * target_fraction).floor() as usize;
    let mut selected = vec![false; n];
    match method {
        Method::Full => selected.iter_mut().for_each(|s| *s = true),
        Method::Random => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut derived_rng(seed, "baseline/random"));
            for &i in &order[..k] {
                selected[i] = true;
            }
        }
        Method::ScoreMargin | Method::OracleMargin => {
            let margins = pairs
                .iter()
                .map(|p| {
                    let missing = |field| Error::MissingField {
                        id: p.id.clone(),
                        field,
                    };
                    if method == Method::ScoreMargin {
                        p.score_margin().ok_or_else(|| missing("score_chosen/score_rejected"))
                    } else {
                        let m = p.true_margin.ok_or_else(|| missing("true_margin"))?;
                        Ok(if p.is_flipped() { -m } else { m })
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| margins[b].total_cmp(&margins[a]).then(a.cmp(&b)));
            for &i in &order[..k] {
                selected[i] = true;
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!("`{other}` is not a baseline method")));
        }
    }
    SelectionMask::new(ids, selected, method)
}

/// `|A ∩ B| / min(|A|, |B|)` over the same pair universe.
pub fn overlap_coefficient(a: &SelectionMask, b: &SelectionMask) -> Result<f64> {
    if a.pair_ids != b.pair_ids {
        return Err(Error::InvalidArgument("masks cover different pairs".into()));
    }
    let (na, nb) = (a.count(), b.count());
    if na == 0 || nb == 0 {
        return Err(Error::Empty("selection"));
    }
    let both = a.selected.iter().zip(&b.selected).filter(|(x, y)| **x && **y).count();
    Ok(both as f64 / na.min(nb) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::TokenSeq;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    fn mask(sel: &[bool]) -> SelectionMask {
        SelectionMask::new(ids(sel.len()), sel.to_vec(), Method::Tif).unwrap()
    }

    fn margin_pairs(margins: &[f64]) -> Vec<PreferencePair> {
        margins
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let mut p = PreferencePair::new(
                    format!("p{i}"),
                    TokenSeq::new(vec![0]).unwrap(),
                    TokenSeq::new(vec![1]).unwrap(),
                    TokenSeq::new(vec![2]).unwrap(),
                );
                p.score_chosen = Some(m);
                p.score_rejected = Some(0.0);
                p
            })
            .collect()
    }

    #[test]
    fn overlap_examples() {
        let a = mask(&[false, true, true, true, false]);
        let b = mask(&[false, false, true, true, true]);
        assert!((overlap_coefficient(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(overlap_coefficient(&a, &a).unwrap(), 1.0);
        let c = mask(&[true, false, false, false, true]);
        assert_eq!(overlap_coefficient(&a, &c).unwrap(), 0.0);
        assert!(overlap_coefficient(&a, &mask(&[false; 5])).is_err());
        assert_eq!(overlap_coefficient(&a, &b).unwrap(), overlap_coefficient(&b, &a).unwrap());
    }

    #[test]
    fn full_bands_drop_extremes_of_either_list() {
        let ld = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let irm = [6.0, 2.0, 1.0, 4.0, 5.0, 3.0];
        let full = SelectionBand::full();
        let m = lossdiff_irm_select(&ids(6), &ld, &irm, &full, &full).unwrap();
        // ld extremes: 0, 5; irm extremes: 2 (min), 0 (max)
        assert_eq!(m.selected, [false, true, false, true, true, false]);
    }

    #[test]
    fn identical_lists_reduce_to_single_band() {
        let s = [0.3, 0.9, 0.1, 0.5, 0.7, 0.2, 0.8];
        let band = SelectionBand::new(20.0, 80.0).unwrap();
        let both = lossdiff_irm_select(&ids(7), &s, &s, &band, &band).unwrap();
        let one = band_select(&ids(7), &s, &band, Method::LossDiffOnly).unwrap();
        assert_eq!(both.selected, one.selected);
        assert!(lossdiff_irm_select(&ids(7), &s, &s[..6], &band, &band).is_err());
    }

    #[test]
    fn halves_partition_interior() {
        let s: Vec<f64> = (0..21).map(|i| ((i * 13) % 21) as f64).collect();
        let lower = band_select(&ids(21), &s, &SelectionBand::new(0.0, 50.0).unwrap(), Method::IrmOnly).unwrap();
        let upper = band_select(&ids(21), &s, &SelectionBand::new(50.0, 100.0).unwrap(), Method::IrmOnly).unwrap();
        let median = crate::stats::median(&s);
        for i in 0..21 {
            let interior = s[i] != 0.0 && s[i] != 20.0 && s[i] != median;
            assert_eq!(lower.selected[i] ^ upper.selected[i], interior);
            assert!(!(lower.selected[i] && upper.selected[i]));
        }
    }

    #[test]
    fn baselines() {
        let pairs = margin_pairs(&[3.0, 1.0, 2.0, 4.0]);
        let top = baseline_select(Method::ScoreMargin, &pairs, 0.5, 0).unwrap();
        assert_eq!(top.selected, [true, false, false, true]);
        let all = baseline_select(Method::Random, &pairs, 1.0, 0).unwrap();
        assert_eq!(all.count(), 4);
        let r1 = baseline_select(Method::Random, &pairs, 0.5, 9).unwrap();
        assert_eq!(r1, baseline_select(Method::Random, &pairs, 0.5, 9).unwrap());
        assert!(baseline_select(Method::OracleMargin, &pairs, 0.5, 0).is_err());
        assert!(baseline_select(Method::Tif, &pairs, 0.5, 0).is_err());
    }

    #[test]
    fn random_fraction_count() {
        let pairs = margin_pairs(&vec![0.0; 48908]);
        let m = baseline_select(Method::Random, &pairs, 0.64, 1).unwrap();
        assert_eq!(m.count(), 31301);
    }

    #[test]
    fn matched_band_hits_target() {
        let s: Vec<f64> = (0..500).map(|i| ((i * 7919) % 500) as f64).collect();
        for target in [100, 250, 333, 480] {
            let band = matched_band(&s, target).unwrap();
            let got = band_mask(&s, band.lo, band.hi).unwrap().iter().filter(|&&b| b).count();
            assert!(got.abs_diff(target) <= 1, "target {target} got {got}");
        }
    }

    #[test]
    fn band_parsing_and_csv() {
        assert_eq!("10,90".parse::<SelectionBand>().unwrap(), SelectionBand::new(10.0, 90.0).unwrap());
        assert!("90,10".parse::<SelectionBand>().is_err());
        let m = mask(&[true, false, true]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        m.write_csv(&path).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("pair_id,method,selected\n"));
        assert_eq!(SelectionMask::read_csv(&path).unwrap(), m);
        assert!(SelectionMask::new(vec!["a".into(), "a".into()], vec![true, true], Method::Full).is_err());
    }
}
