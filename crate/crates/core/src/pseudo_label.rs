//! Turning a teacher attention map into sparse {fg, bg, ignored} targets.
//!
//! The pipeline is: average the attention rows into one map, zero the
//! high-norm sink tokens, then keep only confident tokens. Foreground is every
//! token at or above `tau_fg * a_max`; background is every token at or below
//! `tau_bg * a_max` that also lies outside the minimal box around the
//! foreground. Everything else is ignored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LABEL_FG: i8 = 1;
pub const LABEL_BG: i8 = 0;
pub const LABEL_IGNORE: i8 = -1;

/// Attention rows laid out as `heads x responses x tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRows {
    heads: usize,
    responses: usize,
    tokens: usize,
    rows: Vec<f64>,
}

impl AttentionRows {
    pub fn new(heads: usize, responses: usize, tokens: usize, rows: Vec<f64>) -> Result<Self> {
        if rows.len() != heads * responses * tokens {
            return Err(Error::shape(
                "attention rows",
                format!("{heads}x{responses}x{tokens}"),
                rows.len(),
            ));
        }
        Ok(Self {
            heads,
            responses,
            tokens,
            rows,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn responses(&self) -> usize {
        self.responses
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }
}

/// Element-wise mean over every head and response row.
pub fn aggregate_attention(a: &AttentionRows) -> Result<Vec<f64>> {
    let count = a.heads * a.responses;
    if count == 0 || a.tokens == 0 {
        return Err(Error::Empty(format!(
            "attention with {} heads, {} responses, {} tokens",
            a.heads, a.responses, a.tokens
        )));
    }
    let mut out = vec![0.0; a.tokens];
    for row in a.rows.chunks_exact(a.tokens) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    let inv = 1.0 / count as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormThreshold {
    Absolute(f64),
    /// `mean + k * std` of the sample's token norms.
    Auto { k: f64 },
}

impl Default for NormThreshold {
    fn default() -> Self {
        NormThreshold::Auto { k: 3.0 }
    }
}

impl NormThreshold {
    pub fn resolve(self, norms: &[f64]) -> f64 {
        match self {
            NormThreshold::Absolute(v) => v,
            NormThreshold::Auto { k } => {
                if norms.is_empty() {
                    return f64::INFINITY;
                }
                let n = norms.len() as f64;
                let mean = norms.iter().sum::<f64>() / n;
                let var = norms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                mean + k * var.sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelThresholds {
    pub fg: f64,
    pub bg: f64,
    pub norm: NormThreshold,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        Self {
            fg: 0.2,
            bg: 0.1,
            norm: NormThreshold::default(),
        }
    }
}

impl LabelThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.bg && self.bg < self.fg && self.fg <= 1.0) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 <= tau_bg < tau_fg <= 1, got tau_fg={} tau_bg={}",
                self.fg, self.bg
            )));
        }
        Ok(())
    }
}

/// Inclusive token rectangle `(r0, c0)..=(r1, c1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenBox {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl TokenBox {
    pub fn new(r0: usize, c0: usize, r1: usize, c1: usize) -> Self {
        debug_assert!(r0 <= r1 && c0 <= c1);
        Self { r0, c0, r1, c1 }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.r0..=self.r1).contains(&r) && (self.c0..=self.c1).contains(&c)
    }

    pub fn encloses(&self, other: &TokenBox) -> bool {
        self.r0 <= other.r0 && self.c0 <= other.c0 && self.r1 >= other.r1 && self.c1 >= other.c1
    }

    pub fn height(&self) -> usize {
        self.r1 - self.r0 + 1
    }

    pub fn width(&self) -> usize {
        self.c1 - self.c0 + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn union(&self, other: &TokenBox) -> TokenBox {
        TokenBox::new(
            self.r0.min(other.r0),
            self.c0.min(other.c0),
            self.r1.max(other.r1),
            self.c1.max(other.c1),
        )
    }
}

/// Smallest inclusive box around a set of `(row, col)` tokens.
pub fn min_enclosing_box<I>(tokens: I) -> Result<TokenBox>
where
    I: IntoIterator<Item = (usize, usize)>,
{
    tokens
        .into_iter()
        .map(|(r, c)| TokenBox::new(r, c, r, c))
        .reduce(|a, b| a.union(&b))
        .ok_or_else(|| Error::Empty("min_enclosing_box of an empty token set".into()))
}

/// Box around the non-zero entries of a row-major mask.
pub fn box_of_mask<T: Copy + Default + PartialEq>(mask: &[T], width: usize) -> Result<TokenBox> {
    min_enclosing_box(
        mask.iter()
            .enumerate()
            .filter(|(_, &v)| v != T::default())
            .map(|(j, _)| (j / width, j % width)),
    )
}

/// Zeroes every token whose feature norm exceeds the resolved threshold.
///
/// Returns the cleaned map and the absolute threshold that was applied.
pub fn remove_sink_tokens(map: &[f64], norms: &[f64], norm: NormThreshold) -> Result<(Vec<f64>, f64)> {
    if map.len() != norms.len() {
        return Err(Error::shape("token norms", map.len(), norms.len()));
    }
    let tau = norm.resolve(norms);
    let out = map
        .iter()
        .zip(norms)
        .map(|(&m, &n)| if n > tau { 0.0 } else { m })
        .collect();
    Ok((out, tau))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<i8>,
    pub fg_box: Option<TokenBox>,
    /// `a_max == 0`: every token ignored.
    pub degenerate: bool,
    /// Foreground covers the whole grid, so there is no background.
    pub low_information: bool,
}

impl PseudoLabelMap {
    pub fn count(&self, label: i8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn valid_count(&self) -> usize {
        self.labels.len() - self.count(LABEL_IGNORE)
    }

    /// Structural invariants tying labels to the foreground box.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let Some(b) = self.fg_box else {
            return if self.degenerate && self.labels.iter().all(|&l| l == LABEL_IGNORE) {
                Ok(())
            } else {
                Err("missing foreground box on a non-degenerate map".into())
            };
        };
        if self.count(LABEL_FG) == 0 {
            return Err("no foreground token".into());
        }
        for (j, &l) in self.labels.iter().enumerate() {
            let inside = b.contains(j / self.width, j % self.width);
            match l {
                LABEL_FG if !inside => return Err(format!("fg token {j} outside box")),
                LABEL_BG if inside => return Err(format!("bg token {j} inside box")),
                LABEL_FG | LABEL_BG | LABEL_IGNORE => {}
                other => return Err(format!("invalid label {other} at {j}")),
            }
        }
        Ok(())
    }
}

/// Selective label assignment with inclusive comparisons.
pub fn assign_labels(map: &[f64], height: usize, width: usize, t: &LabelThresholds) -> Result<PseudoLabelMap> {
    if map.len() != height * width {
        return Err(Error::shape("attention map", height * width, map.len()));
    }
    if let Some(j) = map.iter().position(|&v| v < 0.0 || v.is_nan()) {
        return Err(Error::Config(format!("attention map has invalid value {} at {j}", map[j])));
    }
    let a_max = map.iter().cloned().fold(0.0, f64::max);
    if a_max <= 0.0 {
        return Ok(PseudoLabelMap {
            height,
            width,
            labels: vec![LABEL_IGNORE; map.len()],
            fg_box: None,
            degenerate: true,
            low_information: false,
        });
    }
    let fg_cut = t.fg * a_max;
    let bg_cut = t.bg * a_max;
    let fg_box = min_enclosing_box(
        map.iter()
            .enumerate()
            .filter(|(_, &a)| a >= fg_cut)
            .map(|(j, _)| (j / width, j % width)),
    )?;
    let labels: Vec<i8> = map
        .iter()
        .enumerate()
        .map(|(j, &a)| {
            if a >= fg_cut {
                LABEL_FG
            } else if a <= bg_cut && !fg_box.contains(j / width, j % width) {
                LABEL_BG
            } else {
                LABEL_IGNORE
            }
        })
        .collect();
    let low_information = !labels.contains(&LABEL_BG) && fg_box.area() == map.len();
    Ok(PseudoLabelMap {
        height,
        width,
        labels,
        fg_box: Some(fg_box),
        degenerate: false,
        low_information,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(fg: f64, bg: f64) -> LabelThresholds {
        LabelThresholds {
            fg,
            bg,
            norm: NormThreshold::Absolute(f64::INFINITY),
        }
    }

    #[test]
    fn aggregate_single_and_symmetric() {
        let one = AttentionRows::new(1, 1, 3, vec![0.5, 0.25, 0.25]).unwrap();
        assert_eq!(aggregate_attention(&one).unwrap(), vec![0.5, 0.25, 0.25]);
        let two = AttentionRows::new(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(aggregate_attention(&two).unwrap(), vec![0.5, 0.5]);
        let empty = AttentionRows::new(0, 3, 2, vec![]).unwrap();
        assert!(aggregate_attention(&empty).is_err());
    }

    #[test]
    fn sink_removal_by_absolute_norm() {
        let m = [0.5, 0.1, 0.3, 0.1];
        let norms = [10.0, 2.0, 3.0, 2.0];
        let (out, tau) = remove_sink_tokens(&m, &norms, NormThreshold::Absolute(5.0)).unwrap();
        assert_eq!(out, vec![0.0, 0.1, 0.3, 0.1]);
        assert_eq!(tau, 5.0);
        let (same, _) = remove_sink_tokens(&m, &norms, NormThreshold::Absolute(f64::INFINITY)).unwrap();
        assert_eq!(same, m.to_vec());
        assert!(remove_sink_tokens(&m, &norms[..3], NormThreshold::default()).is_err());
    }

    #[test]
    fn auto_norm_threshold_is_mean_plus_k_std() {
        // mean 2, population std 1
        let norms = [1.0, 3.0, 1.0, 3.0];
        assert_eq!(NormThreshold::Auto { k: 3.0 }.resolve(&norms), 5.0);
    }

    #[test]
    fn enclosing_boxes() {
        assert_eq!(min_enclosing_box([(1, 1)]).unwrap(), TokenBox::new(1, 1, 1, 1));
        assert_eq!(min_enclosing_box([(0, 2), (3, 0)]).unwrap(), TokenBox::new(0, 0, 3, 2));
        assert_eq!(
            min_enclosing_box([(1, 0), (1, 1), (2, 1)]).unwrap(),
            TokenBox::new(1, 0, 2, 1)
        );
        assert!(min_enclosing_box(std::iter::empty()).is_err());
    }

    #[test]
    fn worked_three_by_three_example() {
        let m = [0.05, 0.15, 0.02, 0.25, 1.00, 0.05, 0.03, 0.30, 0.08];
        let p = assign_labels(&m, 3, 3, &t(0.2, 0.1)).unwrap();
        assert_eq!(p.labels, vec![0, -1, 0, 1, 1, 0, -1, 1, 0]);
        assert_eq!(p.fg_box, Some(TokenBox::new(1, 0, 2, 1)));
        assert!(!p.degenerate);
        p.check_invariants().unwrap();
    }

    #[test]
    fn all_zero_is_degenerate() {
        let p = assign_labels(&[0.0; 6], 2, 3, &t(0.2, 0.1)).unwrap();
        assert!(p.degenerate);
        assert!(p.labels.iter().all(|&l| l == LABEL_IGNORE));
        assert_eq!(p.fg_box, None);
        p.check_invariants().unwrap();
    }

    #[test]
    fn single_peak() {
        let mut m = vec![0.0; 9];
        m[4] = 1.0;
        let p = assign_labels(&m, 3, 3, &t(0.2, 0.1)).unwrap();
        assert_eq!(p.labels, vec![0, 0, 0, 0, 1, 0, 0, 0, 0]);
        assert_eq!(p.fg_box, Some(TokenBox::new(1, 1, 1, 1)));
    }

    #[test]
    fn full_coverage_is_low_information() {
        let p = assign_labels(&[1.0; 4], 2, 2, &t(0.2, 0.1)).unwrap();
        assert!(p.low_information);
        assert_eq!(p.count(LABEL_BG), 0);
    }

    #[test]
    fn inclusive_ties() {
        // 0.2 * 1.0 == 0.2 exactly, so the tie is foreground; 0.1 ties are background.
        let m = [1.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.1];
        let p = assign_labels(&m, 3, 3, &t(0.2, 0.1)).unwrap();
        assert_eq!(p.labels[1], LABEL_FG);
        assert_eq!(p.labels[8], LABEL_BG);
    }

    #[test]
    fn negative_input_rejected() {
        assert!(assign_labels(&[0.1, -0.1], 1, 2, &t(0.2, 0.1)).is_err());
    }

    #[test]
    fn threshold_validation() {
        assert!(t(0.1, 0.2).validate().is_err());
        assert!(t(0.2, 0.2).validate().is_err());
        assert!(t(0.2, 0.1).validate().is_ok());
    }

    fn arb_map() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..=8, 1usize..=8).prop_flat_map(|(h, w)| {
            prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0], h * w)
                .prop_map(move |m| (h, w, m))
        })
    }

    proptest! {
        #[test]
        fn structural_invariants_hold((h, w, m) in arb_map(), fg in 0.05f64..1.0, frac in 0.0f64..0.99) {
            let p = assign_labels(&m, h, w, &t(fg, fg * frac)).unwrap();
            prop_assert!(p.check_invariants().is_ok(), "{:?}", p.check_invariants());
        }

        #[test]
        fn scale_invariant((h, w, m) in arb_map(), c in prop_oneof![Just(2.0), Just(0.5), Just(4.0)]) {
            // Power-of-two scales keep every product exact.
            let scaled: Vec<f64> = m.iter().map(|v| v * c).collect();
            let a = assign_labels(&m, h, w, &t(0.2, 0.1)).unwrap();
            let b = assign_labels(&scaled, h, w, &t(0.2, 0.1)).unwrap();
            prop_assert_eq!(a.labels, b.labels);
        }

        #[test]
        fn thresholds_are_monotone((h, w, m) in arb_map(), fg in 0.1f64..0.9, bump in 0.0f64..0.1, bg in 0.0f64..0.09) {
            let lo = assign_labels(&m, h, w, &t(fg, bg)).unwrap();
            let hi = assign_labels(&m, h, w, &t(fg + bump, bg)).unwrap();
            prop_assert!(hi.count(LABEL_FG) <= lo.count(LABEL_FG));
            for (a, b) in lo.labels.iter().zip(&hi.labels) {
                if *b == LABEL_FG { prop_assert_eq!(*a, LABEL_FG); }
            }
            let bg_lo = assign_labels(&m, h, w, &t(fg, bg * 0.5)).unwrap();
            for (a, b) in lo.labels.iter().zip(&bg_lo.labels) {
                if *b == LABEL_BG { prop_assert_eq!(*a, LABEL_BG); }
            }
        }
    }
}
