//! Pooled two-sample data: the non-probability sample `S_A` (outcome
//! observed) stacked with the reference survey `S_R` (design weights
//! observed, outcome missing).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One pooled record. Exactly one of `in_a` / `in_r` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    /// Observed outcome; present only for `S_A` units.
    pub outcome: Option<f64>,
    /// Covariates governing selection into `S_A`.
    pub x: Vec<f64>,
    /// Design covariates of the reference survey (may be empty).
    pub d: Vec<f64>,
    pub in_a: bool,
    pub in_r: bool,
    /// Reference-survey weight; present iff `in_r`.
    pub weight_r: Option<f64>,
    /// Exposure for count outcomes.
    pub offset: Option<f64>,
    /// Reference inclusion probability when it is known for the unit even
    /// though the unit was not drawn into `S_R` (designs where the measure
    /// of size is observed in `S_A`). When every `S_A` unit carries it the
    /// pseudo-inclusion step skips the weight regression.
    pub ref_prob: Option<f64>,
}

impl UnitRecord {
    fn validate(&self, row: usize, p: usize, q: usize) -> Result<()> {
        let bad = |message: &str| Error::InvalidRow {
            row,
            message: message.to_string(),
        };
        match (self.in_a, self.in_r) {
            (true, true) => return Err(bad("unit flagged in both samples")),
            (false, false) => return Err(bad("unit flagged in neither sample")),
            _ => {}
        }
        if self.x.len() != p || self.d.len() != q {
            return Err(bad("covariate vector has the wrong length"));
        }
        if self.x.iter().chain(&self.d).any(|v| !v.is_finite()) {
            return Err(bad("non-finite covariate"));
        }
        if self.in_a {
            match self.outcome {
                None => return Err(bad("outcome missing on an S_A row")),
                Some(y) if !y.is_finite() => return Err(bad("non-finite outcome")),
                _ => {}
            }
        }
        if self.in_r {
            if self.outcome.is_some() {
                return Err(bad("outcome present on an S_R row"));
            }
            match self.weight_r {
                None => return Err(bad("weight missing on an S_R row")),
                Some(w) if !(w > 0.0) || !w.is_finite() => return Err(bad("nonpositive weight")),
                _ => {}
            }
        } else if self.weight_r.is_some() {
            return Err(bad("weight present on an S_A row"));
        }
        if let Some(t) = self.offset {
            if !(t > 0.0) || !t.is_finite() {
                return Err(bad("nonpositive offset"));
            }
        }
        if let Some(p) = self.ref_prob {
            if !(p > 0.0 && p <= 1.0) {
                return Err(bad("reference probability outside (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Validated pooled sample `S_C = S_A ∪ S_R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedSample {
    records: Vec<UnitRecord>,
    x_names: Vec<String>,
    d_names: Vec<String>,
    n_a: usize,
    n_r: usize,
    population_size: usize,
}

impl CombinedSample {
    /// Validates the records. When `population_size` is `None` it is
    /// estimated as the rounded total of the reference weights.
    pub fn new(
        records: Vec<UnitRecord>,
        x_names: Vec<String>,
        d_names: Vec<String>,
        population_size: Option<usize>,
    ) -> Result<Self> {
        let (p, q) = (x_names.len(), d_names.len());
        for (i, r) in records.iter().enumerate() {
            r.validate(i, p, q)?;
        }
        let n_a = records.iter().filter(|r| r.in_a).count();
        let n_r = records.len() - n_a;
        let weight_total: f64 = records.iter().filter_map(|r| r.weight_r).sum();
        let population_size = population_size.unwrap_or_else(|| weight_total.round() as usize);
        if population_size < records.len() {
            return Err(Error::Validation(format!(
                "population size {population_size} is smaller than the pooled sample ({})",
                records.len()
            )));
        }
        Ok(Self {
            records,
            x_names,
            d_names,
            n_a,
            n_r,
            population_size,
        })
    }

    pub fn records(&self) -> &[UnitRecord] {
        &self.records
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn d_names(&self) -> &[String] {
        &self.d_names
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn n_r(&self) -> usize {
        self.n_r
    }

    pub fn n_c(&self) -> usize {
        self.records.len()
    }

    pub fn population_size(&self) -> usize {
        self.population_size
    }

    pub fn indices_a(&self) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].in_a)
            .collect()
    }

    pub fn indices_r(&self) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].in_r)
            .collect()
    }

    /// Outcomes of `S_A` units in record order.
    pub fn outcomes_a(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.outcome).collect()
    }

    /// Weights of `S_R` units in record order.
    pub fn weights_r(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.weight_r).collect()
    }

    pub fn membership(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| if r.in_a { 1.0 } else { 0.0 })
            .collect()
    }

    /// Values of a named covariate (searched in `x` then `d`) for every record.
    pub fn variable(&self, name: &str) -> Result<Vec<f64>> {
        if let Some(j) = self.x_names.iter().position(|n| n == name) {
            return Ok(self.records.iter().map(|r| r.x[j]).collect());
        }
        if let Some(j) = self.d_names.iter().position(|n| n == name) {
            return Ok(self.records.iter().map(|r| r.d[j]).collect());
        }
        Err(Error::MissingColumn(name.to_string()))
    }

    /// `Some` when every `S_A` unit carries a known reference probability;
    /// `S_R` units fall back to the inverse of their weight.
    pub fn known_ref_probs(&self) -> Option<Vec<f64>> {
        if self.n_a == 0 || self.records.iter().any(|r| r.in_a && r.ref_prob.is_none()) {
            return None;
        }
        Some(
            self.records
                .iter()
                .map(|r| match (r.ref_prob, r.weight_r) {
                    (Some(p), _) => p,
                    (None, Some(w)) => (1.0 / w).min(1.0),
                    (None, None) => unreachable!("S_A rows checked above"),
                })
                .collect(),
        )
    }

    pub fn offsets(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.offset).collect()
    }

    /// Same units with every outcome shifted by `c`.
    pub fn with_shifted_outcomes(&self, c: f64) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            if let Some(y) = r.outcome.as_mut() {
                *y += c;
            }
        }
        out
    }

    /// Same units with every reference weight multiplied by `c`.
    pub fn with_scaled_weights(&self, c: f64) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            if let Some(w) = r.weight_r.as_mut() {
                *w *= c;
            }
        }
        out
    }

    /// Builds a new sample from a selection of records (repeats allowed),
    /// keeping the population size.
    pub fn resample(&self, idx: &[usize]) -> Self {
        let records: Vec<UnitRecord> = idx.iter().map(|&i| self.records[i].clone()).collect();
        let n_a = records.iter().filter(|r| r.in_a).count();
        Self {
            n_r: records.len() - n_a,
            n_a,
            records,
            x_names: self.x_names.clone(),
            d_names: self.d_names.clone(),
            population_size: self.population_size,
        }
    }
}

/// Column mapping from a CSV file onto [`UnitRecord`] fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub in_a: String,
    pub in_r: String,
    pub outcome: String,
    pub weight: String,
    pub offset: Option<String>,
    pub ref_prob: Option<String>,
    pub x: Vec<String>,
    pub d: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            in_a: "in_a".into(),
            in_r: "in_r".into(),
            outcome: "y".into(),
            weight: "w".into(),
            offset: None,
            ref_prob: None,
            x: Vec::new(),
            d: Vec::new(),
        }
    }
}

fn parse_flag(s: &str, row: usize, col: &str) -> Result<bool> {
    match s.trim() {
        "1" | "true" | "TRUE" | "True" => Ok(true),
        "0" | "false" | "FALSE" | "False" | "" => Ok(false),
        other => Err(Error::InvalidRow {
            row,
            message: format!("column `{col}`: cannot parse `{other}` as a membership flag"),
        }),
    }
}

fn parse_opt(s: &str, row: usize, col: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| Error::InvalidRow {
        row,
        message: format!("column `{col}`: cannot parse `{s}` as a number"),
    })
}

fn parse_req(s: &str, row: usize, col: &str) -> Result<f64> {
    parse_opt(s, row, col)?.ok_or_else(|| Error::InvalidRow {
        row,
        message: format!("column `{col}` is empty"),
    })
}

/// Reads and validates a pooled sample. Row indices in errors are 0-based
/// data rows (the header is not counted).
pub fn load_combined(
    path: impl AsRef<Path>,
    schema: &Schema,
    population_size: Option<usize>,
) -> Result<CombinedSample> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let c_a = find(&schema.in_a)?;
    let c_r = find(&schema.in_r)?;
    let c_y = find(&schema.outcome)?;
    let c_w = find(&schema.weight)?;
    let c_t = schema.offset.as_deref().map(find).transpose()?;
    let c_p = schema.ref_prob.as_deref().map(find).transpose()?;
    let c_x = schema
        .x
        .iter()
        .map(|n| find(n))
        .collect::<Result<Vec<_>>>()?;
    let c_d = schema
        .d
        .iter()
        .map(|n| find(n))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let in_a = parse_flag(field(c_a), row, &schema.in_a)?;
        let in_r = parse_flag(field(c_r), row, &schema.in_r)?;
        let x = c_x
            .iter()
            .zip(&schema.x)
            .map(|(&c, n)| parse_req(field(c), row, n))
            .collect::<Result<Vec<_>>>()?;
        let d = c_d
            .iter()
            .zip(&schema.d)
            .map(|(&c, n)| parse_req(field(c), row, n))
            .collect::<Result<Vec<_>>>()?;
        records.push(UnitRecord {
            outcome: parse_opt(field(c_y), row, &schema.outcome)?,
            x,
            d,
            in_a,
            in_r,
            weight_r: parse_opt(field(c_w), row, &schema.weight)?,
            offset: match (c_t, &schema.offset) {
                (Some(c), Some(n)) => parse_opt(field(c), row, n)?,
                _ => None,
            },
            ref_prob: match (c_p, &schema.ref_prob) {
                (Some(c), Some(n)) => parse_opt(field(c), row, n)?,
                _ => None,
            },
        });
    }
    CombinedSample::new(records, schema.x.clone(), schema.d.clone(), population_size)
}

/// Writes a sample in the layout [`load_combined`] reads back under `schema`.
/// Floats use the shortest representation that round-trips exactly.
pub fn write_combined(
    path: impl AsRef<Path>,
    sample: &CombinedSample,
    schema: &Schema,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        schema.in_a.clone(),
        schema.in_r.clone(),
        schema.outcome.clone(),
        schema.weight.clone(),
    ];
    header.extend(schema.offset.iter().cloned());
    header.extend(schema.ref_prob.iter().cloned());
    header.extend(schema.x.iter().cloned());
    header.extend(schema.d.iter().cloned());
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in &sample.records {
        let mut row = vec![
            (r.in_a as u8).to_string(),
            (r.in_r as u8).to_string(),
            opt(r.outcome),
            opt(r.weight_r),
        ];
        if schema.offset.is_some() {
            row.push(opt(r.offset));
        }
        if schema.ref_prob.is_some() {
            row.push(opt(r.ref_prob));
        }
        row.extend(r.x.iter().map(f64::to_string));
        row.extend(r.d.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One post-stratum: a distinct reference weight value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumLevel {
    pub value: f64,
    pub count: usize,
    /// Stratum inclusion probability recovered from the rescaled weight.
    pub pi: f64,
}

/// Post-strata implied by the distinct reference weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostStrata {
    pub levels: Vec<StratumLevel>,
    /// Stratum index of each `S_R` unit, in record order of `S_R`.
    pub stratum_of: Vec<usize>,
}

impl PostStrata {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.count).collect()
    }

    pub fn pis(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.pi).collect()
    }
}

/// Groups reference weights into post-strata.
///
/// Sorted weights are scanned once; a weight joins the open group while its
/// relative distance from the group's first (smallest) weight is at most
/// `weight_tolerance`. The level value is the group mean. Stratum
/// probabilities are `π_j = min(1, 1 / w̃_j)` where `w̃` are the weights
/// rescaled to total the population size.
pub fn derive_post_strata(sample: &CombinedSample, weight_tolerance: f64) -> Result<PostStrata> {
    let weights = sample.weights_r();
    strata_from_weights(&weights, sample.population_size(), weight_tolerance)
}

pub fn strata_from_weights(
    weights: &[f64],
    population_size: usize,
    weight_tolerance: f64,
) -> Result<PostStrata> {
    if weights.is_empty() {
        return Err(Error::Validation("reference sample is empty".into()));
    }
    if !(weight_tolerance >= 0.0) {
        return Err(Error::Validation(
            "weight tolerance must be nonnegative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[a].total_cmp(&weights[b]));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut anchor = f64::NAN;
    for &i in &order {
        let w = weights[i];
        match groups.last_mut() {
            Some(g) if (w - anchor) / anchor <= weight_tolerance => g.push(i),
            _ => {
                anchor = w;
                groups.push(vec![i]);
            }
        }
    }

    let scale = population_size as f64 / weights.iter().sum::<f64>();
    let mut stratum_of = vec![0; weights.len()];
    let levels = groups
        .iter()
        .enumerate()
        .map(|(j, g)| {
            for &i in g {
                stratum_of[i] = j;
            }
            let value = g.iter().map(|&i| weights[i]).sum::<f64>() / g.len() as f64;
            StratumLevel {
                value,
                count: g.len(),
                pi: (1.0 / (value * scale)).min(1.0),
            }
        })
        .collect();
    Ok(PostStrata { levels, stratum_of })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(y: f64, x: f64) -> UnitRecord {
        UnitRecord {
            outcome: Some(y),
            x: vec![x],
            d: vec![],
            in_a: true,
            in_r: false,
            weight_r: None,
            offset: None,
            ref_prob: None,
        }
    }

    fn r(w: f64, x: f64) -> UnitRecord {
        UnitRecord {
            outcome: None,
            x: vec![x],
            d: vec![],
            in_a: false,
            in_r: true,
            weight_r: Some(w),
            offset: None,
            ref_prob: None,
        }
    }

    fn sample(records: Vec<UnitRecord>) -> Result<CombinedSample> {
        CombinedSample::new(records, vec!["x".into()], vec![], None)
    }

    #[test]
    fn counts_membership() {
        let s = sample(vec![
            a(1.0, 0.0),
            a(2.0, 1.0),
            a(3.0, 2.0),
            r(4.0, 0.0),
            r(6.0, 1.0),
        ])
        .unwrap();
        assert_eq!((s.n_a(), s.n_r(), s.n_c()), (3, 2, 5));
        assert_eq!(s.population_size(), 10);
    }

    #[test]
    fn rejects_outcome_on_reference_row() {
        let mut bad = r(2.0, 0.0);
        bad.outcome = Some(1.0);
        let err = sample(vec![a(1.0, 0.0), bad]).unwrap_err();
        match err {
            Error::InvalidRow { row, message } => {
                assert_eq!(row, 1);
                assert!(message.contains("outcome present"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_nonpositive_weight() {
        let err = sample(vec![a(1.0, 0.0), r(0.0, 0.0)]).unwrap_err();
        assert!(err.to_string().contains("nonpositive weight"));
    }

    #[test]
    fn rejects_double_and_missing_membership() {
        let mut both = a(1.0, 0.0);
        both.in_r = true;
        both.weight_r = Some(1.0);
        assert!(sample(vec![both]).is_err());
        let mut neither = a(1.0, 0.0);
        neither.in_a = false;
        assert!(sample(vec![neither]).is_err());
    }

    #[test]
    fn strata_group_distinct_values() {
        let s = strata_from_weights(&[2.0, 5.0, 2.0, 5.0, 5.0], 16, 0.0).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.counts(), vec![2, 3]);
        assert_eq!(s.stratum_of, vec![0, 1, 0, 1, 1]);
        // rescaled weights total 16 over a raw total of 19
        let pi0 = 1.0 / (2.0 * 16.0 / 19.0);
        assert!((s.levels[0].pi - pi0).abs() < 1e-15);
    }

    #[test]
    fn equal_weights_form_one_stratum() {
        let s = strata_from_weights(&[3.0; 7], 21, 0.0).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.counts(), vec![7]);
        assert!((s.levels[0].pi - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn near_ties_merge_under_tolerance() {
        let w = [2.0, 2.000_000_1];
        // oracle: sorted scan comparing against the first member of the run
        let mut runs = 1;
        for pair in w.windows(2) {
            if (pair[1] - pair[0]) / pair[0] > 1e-6 {
                runs += 1;
            }
        }
        let s = strata_from_weights(&w, 10, 1e-6).unwrap();
        assert_eq!(s.len(), runs);
        assert_eq!(s.len(), 1);
        assert_eq!(strata_from_weights(&w, 10, 0.0).unwrap().len(), 2);
    }

    #[test]
    fn probabilities_clamped_to_one() {
        // population smaller than weight total forces rescaled weights below one
        let s = strata_from_weights(&[1.0, 10.0], 2, 0.0).unwrap();
        assert_eq!(s.levels[0].pi, 1.0);
    }
}
