//! Aggregation of two-alternative forced-choice preference data: preference
//! rate, confidence-weighted rate, mean confidence, and the binomial
//! significance test against chance.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::BTreeMap;
use std::io::Read;

pub const ALLOWED_CHANNELS: [u32; 4] = [24, 32, 64, 128];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreferenceTrial {
    pub trial_id: String,
    pub channels: u32,
    pub chose_boosted: bool,
    /// 5-point Likert confidence, 1..=5.
    pub confidence: u8,
}

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("no trials provided")]
    EmptyInput,
    #[error("binomial test needs at least 10 trials, got {0}")]
    TooFewTrials(usize),
    #[error("trial {trial_id}: confidence {confidence} outside 1..=5")]
    BadConfidence { trial_id: String, confidence: u8 },
    #[error("trial {trial_id}: channels {channels} not one of 24/32/64/128")]
    BadChannels { trial_id: String, channels: u32 },
    #[error("csv parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },
}

pub fn validate(trials: &[PreferenceTrial]) -> Result<(), StatsError> {
    for t in trials {
        if !(1..=5).contains(&t.confidence) {
            return Err(StatsError::BadConfidence {
                trial_id: t.trial_id.clone(),
                confidence: t.confidence,
            });
        }
        if !ALLOWED_CHANNELS.contains(&t.channels) {
            return Err(StatsError::BadChannels {
                trial_id: t.trial_id.clone(),
                channels: t.channels,
            });
        }
    }
    Ok(())
}

/// Fraction of trials in which the boosted image was chosen.
pub fn preference_rate(trials: &[PreferenceTrial]) -> Result<f64, StatsError> {
    if trials.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let chosen = trials.iter().filter(|t| t.chose_boosted).count();
    Ok(chosen as f64 / trials.len() as f64)
}

/// Confidence-weighted preference: `sum(conf_i * chose_i) / sum(conf_i)`.
/// With equal confidences this equals the unweighted rate exactly.
pub fn weighted_preference_rate(trials: &[PreferenceTrial]) -> Result<f64, StatsError> {
    if trials.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let num: f64 = trials
        .iter()
        .map(|t| t.confidence as f64 * if t.chose_boosted { 1.0 } else { 0.0 })
        .sum();
    let den: f64 = trials.iter().map(|t| t.confidence as f64).sum();
    Ok(num / den)
}

pub fn mean_confidence(trials: &[PreferenceTrial]) -> Result<f64, StatsError> {
    if trials.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    Ok(trials.iter().map(|t| t.confidence as f64).sum::<f64>() / trials.len() as f64)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BinomialTest {
    pub n: usize,
    pub p_hat: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Two-sided normal approximation to the binomial against `p0`:
/// `z = (p_hat - p0) / sqrt(p0 (1 - p0) / n)`.
pub fn binomial_test(trials: &[PreferenceTrial], p0: f64) -> Result<BinomialTest, StatsError> {
    let n = trials.len();
    if n < 10 {
        return Err(StatsError::TooFewTrials(n));
    }
    let p_hat = preference_rate(trials)?;
    let se = (p0 * (1.0 - p0) / n as f64).sqrt();
    let z = (p_hat - p0) / se;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p_value = 2.0 * (1.0 - normal.cdf(z.abs()));
    Ok(BinomialTest {
        n,
        p_hat,
        z,
        p_value,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupSummary {
    pub n: usize,
    pub preference_rate: f64,
    pub weighted_preference_rate: f64,
    pub mean_confidence: f64,
}

/// The JSON summary emitted by the study-stats command: per-montage rows,
/// the pooled row, and the binomial test of the pooled preference.
#[derive(Debug, Clone, Serialize)]
pub struct StudySummary {
    pub per_montage: BTreeMap<String, GroupSummary>,
    pub overall: GroupSummary,
    pub binomial: BinomialTest,
}

fn group_summary(trials: &[PreferenceTrial]) -> Result<GroupSummary, StatsError> {
    Ok(GroupSummary {
        n: trials.len(),
        preference_rate: preference_rate(trials)?,
        weighted_preference_rate: weighted_preference_rate(trials)?,
        mean_confidence: mean_confidence(trials)?,
    })
}

pub fn summarize(trials: &[PreferenceTrial]) -> Result<StudySummary, StatsError> {
    if trials.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    validate(trials)?;
    let mut groups: BTreeMap<u32, Vec<PreferenceTrial>> = BTreeMap::new();
    for t in trials {
        groups.entry(t.channels).or_default().push(t.clone());
    }
    let mut per_montage = BTreeMap::new();
    for (channels, group) in &groups {
        per_montage.insert(channels.to_string(), group_summary(group)?);
    }
    Ok(StudySummary {
        per_montage,
        overall: group_summary(trials)?,
        binomial: binomial_test(trials, 0.5)?,
    })
}

/// Reads preference trials from CSV with columns `trial_id`, `channels`,
/// `chose_boosted`, `confidence`; extra (demographic) columns are ignored.
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<PreferenceTrial>, StatsError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, StatsError> {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| StatsError::BadRow {
                row: 0,
                message: format!("missing column '{name}'"),
            })
    };
    let (c_id, c_ch, c_chose, c_conf) = (
        col("trial_id")?,
        col("channels")?,
        col("chose_boosted")?,
        col("confidence")?,
    );
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 2;
        let parse_bool = |s: &str| match s.to_lowercase().as_str() {
            "true" | "1" | "yes" | "boosted" => Ok(true),
            "false" | "0" | "no" | "raw" => Ok(false),
            other => Err(StatsError::BadRow {
                row,
                message: format!("cannot parse chose_boosted '{other}'"),
            }),
        };
        out.push(PreferenceTrial {
            trial_id: record.get(c_id).unwrap_or("").to_string(),
            channels: record
                .get(c_ch)
                .unwrap_or("")
                .parse()
                .map_err(|e| StatsError::BadRow {
                    row,
                    message: format!("channels: {e}"),
                })?,
            chose_boosted: parse_bool(record.get(c_chose).unwrap_or(""))?,
            confidence: record
                .get(c_conf)
                .unwrap_or("")
                .parse()
                .map_err(|e| StatsError::BadRow {
                    row,
                    message: format!("confidence: {e}"),
                })?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(id: &str, channels: u32, chose: bool, conf: u8) -> PreferenceTrial {
        PreferenceTrial {
            trial_id: id.into(),
            channels,
            chose_boosted: chose,
            confidence: conf,
        }
    }

    #[test]
    fn preference_rate_basics() {
        let all = vec![t("a", 24, true, 3), t("b", 24, true, 3)];
        assert_eq!(preference_rate(&all).unwrap(), 1.0);
        let three_of_four = vec![
            t("a", 24, true, 3),
            t("b", 24, true, 3),
            t("c", 24, true, 3),
            t("d", 24, false, 3),
        ];
        assert_eq!(preference_rate(&three_of_four).unwrap(), 0.75);
        assert!(matches!(preference_rate(&[]), Err(StatsError::EmptyInput)));
    }

    #[test]
    fn weighted_rate_hand_case_and_equal_confidence_exactness() {
        let trials = vec![t("a", 24, true, 5), t("b", 24, false, 1)];
        assert!((weighted_preference_rate(&trials).unwrap() - 5.0 / 6.0).abs() < 1e-15);

        for conf in 1..=5u8 {
            let trials = vec![
                t("a", 24, true, conf),
                t("b", 24, false, conf),
                t("c", 24, true, conf),
            ];
            assert_eq!(
                weighted_preference_rate(&trials).unwrap(),
                preference_rate(&trials).unwrap(),
                "equal confidences must equal the unweighted rate exactly"
            );
        }
    }

    #[test]
    fn raising_confidence_of_a_chosen_trial_never_decreases_weighted_rate() {
        let mut trials = vec![
            t("a", 24, true, 2),
            t("b", 24, false, 4),
            t("c", 24, true, 1),
            t("d", 24, false, 5),
        ];
        let mut prev = weighted_preference_rate(&trials).unwrap();
        for conf in 2..=5u8 {
            trials[2].confidence = conf;
            let now = weighted_preference_rate(&trials).unwrap();
            assert!(now >= prev - 1e-15);
            prev = now;
        }
    }

    #[test]
    fn stratified_rates_recombine_to_the_pooled_rate() {
        let mut trials = Vec::new();
        let spec = [(24u32, 10usize, 7usize), (32, 8, 5), (64, 12, 9), (128, 6, 4)];
        for (ch, n, chosen) in spec {
            for i in 0..n {
                trials.push(t(&format!("{ch}-{i}"), ch, i < chosen, 3));
            }
        }
        let pooled = preference_rate(&trials).unwrap();
        let mut acc = 0.0;
        for (ch, n, _) in spec {
            let group: Vec<_> = trials.iter().filter(|t| t.channels == ch).cloned().collect();
            acc += preference_rate(&group).unwrap() * n as f64;
        }
        acc /= trials.len() as f64;
        assert!((acc - pooled).abs() < 1e-12);
    }

    #[test]
    fn binomial_test_null_and_significant_cases() {
        let balanced: Vec<PreferenceTrial> = (0..20)
            .map(|i| t(&format!("x{i}"), 24, i % 2 == 0, 3))
            .collect();
        let r = binomial_test(&balanced, 0.5).unwrap();
        assert_eq!(r.z, 0.0);
        assert_eq!(r.p_value, 1.0);

        // 434 of 554 chosen: z = (434/554 - 0.5)/sqrt(0.25/554) ~= 13.34
        let study: Vec<PreferenceTrial> = (0..554)
            .map(|i| t(&format!("s{i}"), 24, i < 434, 3))
            .collect();
        let r = binomial_test(&study, 0.5).unwrap();
        let p_hat = 434.0 / 554.0;
        let z_oracle = (p_hat - 0.5) / (0.25f64 / 554.0).sqrt();
        assert!((r.z - z_oracle).abs() < 1e-12);
        assert!((r.z - 13.34).abs() < 0.01, "z {z}", z = r.z);
        assert!(r.p_value < 1e-6);

        assert!(matches!(
            binomial_test(&balanced[..5], 0.5),
            Err(StatsError::TooFewTrials(5))
        ));
    }

    #[test]
    fn validation_rejects_bad_confidence_and_channels() {
        assert!(matches!(
            validate(&[t("a", 24, true, 0)]),
            Err(StatsError::BadConfidence { .. })
        ));
        assert!(matches!(
            validate(&[t("a", 24, true, 6)]),
            Err(StatsError::BadConfidence { .. })
        ));
        assert!(matches!(
            validate(&[t("a", 16, true, 3)]),
            Err(StatsError::BadChannels { .. })
        ));
    }

    #[test]
    fn csv_roundtrip_ignores_demographics_and_summary_groups_by_montage() {
        let csv_text = "\
trial_id,channels,chose_boosted,confidence,age,education
p1,128,true,4,33,msc
p2,128,false,3,41,phd
p3,24,boosted,5,27,bsc
p4,24,raw,2,52,phd
p5,64,1,4,38,msc
p6,64,1,3,29,msc
p7,32,0,1,45,phd
p8,32,1,5,36,msc
p9,128,true,4,33,msc
p10,24,true,4,61,phd
";
        let trials = read_csv(csv_text.as_bytes()).unwrap();
        assert_eq!(trials.len(), 10);
        let summary = summarize(&trials).unwrap();
        assert_eq!(summary.per_montage.len(), 4);
        assert_eq!(summary.per_montage["24"].n, 3);
        assert!((summary.overall.preference_rate - 0.7).abs() < 1e-12);
        let json = serde_json::to_value(&summary).unwrap();
        assert!(json["binomial"]["z"].is_number());
        assert!(json["per_montage"]["128"]["weighted_preference_rate"].is_number());
    }
}
