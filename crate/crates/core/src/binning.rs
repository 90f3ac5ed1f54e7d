//! Probability discretization.
//!
//! A [`BinningScheme`] cuts `(0, 1]` into `k` left-closed bins (the last one
//! also closed on the right). Each bin maps either to a block one-hot vector
//! of dimension `d` or, for the learned scorer, to a dedicated probability
//! token per (stream, bin) pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::{Dataset, GenerationRecord, Stream, StreamMask};

pub const DEFAULT_BINS: usize = 8;
const DEFAULT_DIM: usize = 768;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinMode {
    Uniform,
    Quantile,
}

impl std::str::FromStr for BinMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(BinMode::Uniform),
            "quantile" => Ok(BinMode::Quantile),
            other => Err(Error::invalid(format!("unknown bin mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningScheme {
    pub k: usize,
    pub mode: BinMode,
    /// `k - 1` strictly increasing interior cut points in (0, 1).
    pub boundaries: Vec<f64>,
    /// Block-vector dimension; a multiple of `k`.
    pub d: usize,
}

fn default_dim(k: usize) -> usize {
    DEFAULT_DIM.div_ceil(k) * k
}

impl BinningScheme {
    pub fn uniform(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("need at least 2 bins, got {k}")));
        }
        let boundaries = (1..k).map(|j| j as f64 / k as f64).collect();
        Ok(BinningScheme {
            k,
            mode: BinMode::Uniform,
            boundaries,
            d: default_dim(k),
        })
    }

    pub fn with_dim(mut self, d: usize) -> Result<Self> {
        if d == 0 || !d.is_multiple_of(self.k) {
            return Err(Error::invalid(format!(
                "dimension {d} is not a positive multiple of k = {}",
                self.k
            )));
        }
        self.d = d;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.boundaries.len() != self.k - 1 {
            return Err(Error::invalid(format!(
                "scheme with k = {} needs {} boundaries, has {}",
                self.k,
                self.k.saturating_sub(1),
                self.boundaries.len()
            )));
        }
        if self.d == 0 || !self.d.is_multiple_of(self.k) {
            return Err(Error::invalid(format!(
                "dimension {} is not a positive multiple of k = {}",
                self.d, self.k
            )));
        }
        if self.boundaries.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::invalid("boundaries must lie in (0, 1)"));
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("boundaries must be strictly increasing"));
        }
        Ok(())
    }

    pub fn bin_index(&self, p: f64) -> Result<usize> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::invalid(format!("probability {p} outside (0, 1]")));
        }
        // Ties at a boundary go to the upper bin.
        Ok(self.boundaries.partition_point(|b| *b <= p))
    }

    /// Block one-hot vector: positions `bin * d/k .. (bin + 1) * d/k` are 1.
    pub fn bin_vector(&self, bin: usize) -> Result<Vec<f64>> {
        if bin >= self.k {
            return Err(Error::invalid(format!(
                "bin {bin} out of range for k = {}",
                self.k
            )));
        }
        let width = self.d / self.k;
        let mut v = vec![0.0; self.d];
        v[bin * width..(bin + 1) * width].fill(1.0);
        Ok(v)
    }
}

/// Fits `k - 1` boundaries at the `j/k` quantiles of `probs`, interpolating
/// linearly between order statistics. Coinciding boundaries are pushed apart
/// by one ulp to keep them strictly increasing.
pub fn fit_quantile_bins(probs: &[f64], k: usize) -> Result<BinningScheme> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 bins, got {k}")));
    }
    if probs.is_empty() {
        return Err(Error::invalid(
            "cannot fit quantile bins on an empty sample",
        ));
    }
    if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::invalid(format!("probability {p} outside (0, 1]")));
    }
    let mut sorted = probs.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.first() == sorted.last() {
        return Err(Error::invalid(
            "quantile bins need at least two distinct probabilities",
        ));
    }

    let n = sorted.len();
    let mut boundaries: Vec<f64> = (1..k)
        .map(|j| {
            let h = (n - 1) as f64 * j as f64 / k as f64;
            let lo = h.floor() as usize;
            let frac = h - lo as f64;
            match sorted.get(lo + 1) {
                Some(next) => sorted[lo] + frac * (next - sorted[lo]),
                None => sorted[lo],
            }
        })
        .collect();

    for j in 1..boundaries.len() {
        if boundaries[j] <= boundaries[j - 1] {
            boundaries[j] = boundaries[j - 1].next_up();
        }
    }
    // Cut points must stay below 1; walk back down from the top if needed.
    let last = boundaries.len() - 1;
    if boundaries[last] >= 1.0 {
        boundaries[last] = 1.0f64.next_down();
        for j in (0..last).rev() {
            if boundaries[j] >= boundaries[j + 1] {
                boundaries[j] = boundaries[j + 1].next_down();
            }
        }
    }
    if boundaries[0] <= 0.0 {
        return Err(Error::invalid(
            "too few distinct probabilities to place the quantile boundaries",
        ));
    }

    let scheme = BinningScheme {
        k,
        mode: BinMode::Quantile,
        boundaries,
        d: default_dim(k),
    };
    scheme.validate()?;
    Ok(scheme)
}

/// Discretized probability of one response token under one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProbToken {
    pub stream: Stream,
    pub bin: usize,
}

/// Per response position, the probability tokens of the active streams in
/// canonical stream order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbTokenSequence {
    pub positions: Vec<Vec<ProbToken>>,
}

impl ProbTokenSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.positions.iter().map(Vec::len).sum()
    }
}

/// One scheme per stream (indexed in [`Stream::ALL`] order), or one scheme
/// shared by all four streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamBinning {
    pub shared: bool,
    pub schemes: Vec<BinningScheme>,
}

impl StreamBinning {
    pub fn shared(scheme: BinningScheme) -> Self {
        StreamBinning {
            shared: true,
            schemes: vec![scheme; 4],
        }
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Ok(Self::shared(BinningScheme::uniform(k)?))
    }

    /// Fits the binning on the probabilities found in `d`. In quantile mode a
    /// stream that never occurs in `d` falls back to uniform bins.
    pub fn fit(d: &Dataset, k: usize, mode: BinMode, shared: bool) -> Result<Self> {
        if mode == BinMode::Uniform {
            return Self::uniform(k);
        }
        let per_stream: Vec<Vec<f64>> = Stream::ALL
            .iter()
            .map(|s| {
                d.records
                    .iter()
                    .filter_map(|r| r.stream(*s))
                    .flatten()
                    .copied()
                    .collect()
            })
            .collect();
        if shared {
            let pooled: Vec<f64> = per_stream.concat();
            return Ok(Self::shared(fit_quantile_bins(&pooled, k)?));
        }
        let schemes = per_stream
            .iter()
            .zip(Stream::ALL)
            .map(|(probs, s)| {
                if probs.is_empty() {
                    log::warn!("stream {s} absent from the fitting data; using uniform bins");
                    BinningScheme::uniform(k)
                } else {
                    fit_quantile_bins(probs, k)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StreamBinning {
            shared: false,
            schemes,
        })
    }

    pub fn k(&self) -> usize {
        self.schemes[0].k
    }

    pub fn scheme(&self, s: Stream) -> &BinningScheme {
        &self.schemes[s.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.schemes.len() != 4 {
            return Err(Error::invalid(format!(
                "expected 4 stream schemes, found {}",
                self.schemes.len()
            )));
        }
        for s in &self.schemes {
            s.validate()?;
            if s.k != self.k() {
                return Err(Error::invalid(
                    "all stream schemes must share one bin count",
                ));
            }
        }
        Ok(())
    }
}

/// Maps every response token's probabilities under the masked-in streams to
/// probability tokens.
pub fn encode_streams(
    rec: &GenerationRecord,
    bins: &StreamBinning,
    mask: StreamMask,
) -> Result<ProbTokenSequence> {
    let streams = mask
        .iter()
        .map(|s| {
            rec.stream(s)
                .map(|probs| (s, probs))
                .ok_or_else(|| Error::Missing {
                    id: rec.id.clone(),
                    what: format!("stream {s}"),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let positions = (0..rec.len())
        .map(|i| {
            streams
                .iter()
                .map(|(s, probs)| {
                    Ok(ProbToken {
                        stream: *s,
                        bin: bins.scheme(*s).bin_index(probs[i])?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbTokenSequence { positions })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_example() {
        let probs: Vec<f64> = (1..=8).map(|i| i as f64 / 10.0).collect();
        let s = fit_quantile_bins(&probs, 4).unwrap();
        let expected = [0.275, 0.45, 0.625];
        for (b, e) in s.boundaries.iter().zip(expected) {
            assert!((b - e).abs() < 1e-12, "{b} vs {e}");
        }
        // Membership oracle: 0.45 <= 0.5 < 0.625.
        assert_eq!(s.bin_index(0.5).unwrap(), 2);
    }

    #[test]
    fn quantile_median_of_symmetric_grid() {
        let probs: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        let s = fit_quantile_bins(&probs, 2).unwrap();
        assert!((s.boundaries[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn duplicate_boundaries_are_separated() {
        let mut probs = vec![0.5; 90];
        probs.extend((1..=10).map(|i| i as f64 / 20.0));
        let s = fit_quantile_bins(&probs, 8).unwrap();
        assert!(s.boundaries.windows(2).all(|w| w[0] < w[1]));
        assert!(s.bin_index(0.5).unwrap() <= 7);
    }

    #[test]
    fn saturated_probabilities_stay_below_one() {
        let mut probs = vec![1.0; 80];
        probs.extend([0.2, 0.4, 0.6, 0.8]);
        let s = fit_quantile_bins(&probs, 8).unwrap();
        s.validate().unwrap();
        assert_eq!(s.bin_index(1.0).unwrap(), 7);
    }

    #[test]
    fn quantile_errors() {
        assert!(fit_quantile_bins(&[], 4).is_err());
        assert!(fit_quantile_bins(&[0.3, 0.3, 0.3], 4).is_err());
        assert!(fit_quantile_bins(&[0.3, 0.4], 1).is_err());
        assert!(fit_quantile_bins(&[0.0, 0.4], 2).is_err());
    }

    #[test]
    fn uniform_bin_index() {
        let s = BinningScheme::uniform(8).unwrap();
        assert_eq!(s.bin_index(0.999).unwrap(), 7);
        assert_eq!(s.bin_index(1.0).unwrap(), 7);
        assert_eq!(s.bin_index(0.1249).unwrap(), 0);
        assert_eq!(s.bin_index(0.125).unwrap(), 1);
        assert!(s.bin_index(0.0).is_err());
        assert!(s.bin_index(1.5).is_err());
    }

    #[test]
    fn block_vectors() {
        let s = BinningScheme::uniform(4).unwrap().with_dim(8).unwrap();
        assert_eq!(
            s.bin_vector(1).unwrap(),
            vec![0., 0., 1., 1., 0., 0., 0., 0.]
        );
        assert_eq!(
            s.bin_vector(0).unwrap(),
            vec![1., 1., 0., 0., 0., 0., 0., 0.]
        );
        assert!(s.bin_vector(4).is_err());
        assert!(BinningScheme::uniform(4).unwrap().with_dim(10).is_err());
    }

    fn four_stream_record() -> GenerationRecord {
        let mut rec = GenerationRecord::new("r", "q", vec!["a".into(), "b".into()], vec![0.9, 0.1]);
        rec.stream_no_image = Some(vec![0.8, 0.2]);
        rec.stream_no_context = Some(vec![0.3, 0.4]);
        rec.stream_question_only = Some(vec![0.05, 0.6]);
        rec
    }

    #[test]
    fn encode_shapes_and_masks() {
        let bins = StreamBinning::uniform(8).unwrap();
        let rec = four_stream_record();
        let all = encode_streams(&rec, &bins, StreamMask::ALL).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all.token_count(), 8);
        assert_eq!(
            all.positions[0][0],
            ProbToken {
                stream: Stream::Full,
                bin: 7
            }
        );
        assert_eq!(
            all.positions[0][3],
            ProbToken {
                stream: Stream::QuestionOnly,
                bin: 0
            }
        );

        let no_q =
            encode_streams(&rec, &bins, StreamMask::ALL.without(Stream::QuestionOnly)).unwrap();
        assert!(no_q.positions.iter().all(|p| p.len() == 3));

        let lars = encode_streams(&rec, &bins, StreamMask::FULL_ONLY).unwrap();
        assert_eq!(
            lars.positions,
            vec![
                vec![ProbToken {
                    stream: Stream::Full,
                    bin: 7
                }],
                vec![ProbToken {
                    stream: Stream::Full,
                    bin: 0
                }]
            ]
        );
    }

    #[test]
    fn encode_missing_stream_is_named() {
        let mut rec = four_stream_record();
        rec.stream_no_context = None;
        let err =
            encode_streams(&rec, &StreamBinning::uniform(4).unwrap(), StreamMask::ALL).unwrap_err();
        assert!(err.to_string().contains("no_context"), "{err}");
    }

    #[test]
    fn per_stream_fit_differs_from_shared() {
        let recs: Vec<GenerationRecord> = (0..50)
            .map(|i| {
                let mut r = GenerationRecord::new(
                    format!("r{i}"),
                    "q",
                    vec!["a".into()],
                    vec![0.5 + i as f64 / 200.0],
                );
                r.stream_question_only = Some(vec![0.01 + i as f64 / 500.0]);
                r
            })
            .collect();
        let d = Dataset::new(recs).unwrap();
        let per = StreamBinning::fit(&d, 4, BinMode::Quantile, false).unwrap();
        per.validate().unwrap();
        assert!(per.scheme(Stream::Full).boundaries[0] > 0.5);
        assert!(per.scheme(Stream::QuestionOnly).boundaries[2] < 0.12);
        assert_eq!(per.scheme(Stream::NoImage).mode, BinMode::Uniform);
        let shared = StreamBinning::fit(&d, 4, BinMode::Quantile, true).unwrap();
        assert_eq!(
            shared.scheme(Stream::Full),
            shared.scheme(Stream::QuestionOnly)
        );
    }

    #[test]
    fn scheme_json_shape() {
        let s = BinningScheme::uniform(4).unwrap();
        let v = serde_json::to_value(&s).unwrap();
        assert_eq!(v["k"], 4);
        assert_eq!(v["mode"], "uniform");
        assert_eq!(v["d"], 768);
        assert_eq!(v["boundaries"].as_array().unwrap().len(), 3);
    }
}
