//! Label-map morphology and the four labeling tendencies.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TaxError};
use crate::image::Mask;

/// Square structuring element of side `2 * radius + 1`, origin at the centre.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuringElement {
    radius: usize,
}

impl StructuringElement {
    pub fn square(radius: usize) -> Result<Self> {
        if radius == 0 {
            return Err(TaxError::Config("structuring element radius must be at least 1".into()));
        }
        Ok(StructuringElement { radius })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Window rows/cols around `(y, x)`, clipped to the mask.
    fn window(&self, y: usize, x: usize, h: usize, w: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let r = self.radius;
        (y.saturating_sub(r)..(y + r + 1).min(h), x.saturating_sub(r)..(x + r + 1).min(w))
    }
}

fn check_foreground(class: u8) -> Result<()> {
    if class == 0 {
        return Err(TaxError::Invalid("morphology is defined for foreground classes only, got class 0".into()));
    }
    Ok(())
}

/// Grows class `class` into background pixels that have a `class` pixel in
/// their window. Pixels of other foreground classes are never overwritten.
pub fn dilate(mask: &Mask, class: u8, se: StructuringElement) -> Result<Mask> {
    check_foreground(class)?;
    let (h, w) = (mask.height, mask.width);
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != 0 {
                continue;
            }
            let (ys, xs) = se.window(y, x, h, w);
            if ys.into_iter().any(|yy| xs.clone().any(|xx| mask.get(yy, xx) == class)) {
                out.set(y, x, class);
            }
        }
    }
    Ok(out)
}

/// Relabels to background every `class` pixel whose window (clipped at the
/// border) is not entirely `class`.
pub fn erode(mask: &Mask, class: u8, se: StructuringElement) -> Result<Mask> {
    check_foreground(class)?;
    let (h, w) = (mask.height, mask.width);
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != class {
                continue;
            }
            let (ys, xs) = se.window(y, x, h, w);
            if !ys.into_iter().all(|yy| xs.clone().all(|xx| mask.get(yy, xx) == class)) {
                out.set(y, x, 0);
            }
        }
    }
    Ok(out)
}

/// Replaces every `block x block` cell by its majority label (ties go to the
/// smaller label).
pub fn simplify(mask: &Mask, block: usize) -> Result<Mask> {
    let (h, w) = (mask.height, mask.width);
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(TaxError::Invalid(format!("simplify: {h}x{w} mask is not divisible into {block}x{block} cells")));
    }
    let mut out = Mask::new(h, w);
    let mut counts = [0usize; 256];
    for cy in (0..h).step_by(block) {
        for cx in (0..w).step_by(block) {
            counts.fill(0);
            for y in cy..cy + block {
                for x in cx..cx + block {
                    counts[mask.get(y, x) as usize] += 1;
                }
            }
            // max_by_key returns the last maximum; scan in reverse so ties go low.
            let label = (0..256).rev().max_by_key(|&c| counts[c]).unwrap_or(0) as u8;
            for y in cy..cy + block {
                for x in cx..cx + block {
                    out.set(y, x, label);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tendency {
    Dilated,
    Eroded,
    Simplified,
    None,
}

impl Tendency {
    pub const ORDER: [Tendency; 4] = [Tendency::Dilated, Tendency::Eroded, Tendency::Simplified, Tendency::None];

    pub fn name(self) -> &'static str {
        match self {
            Tendency::Dilated => "dilated",
            Tendency::Eroded => "eroded",
            Tendency::Simplified => "simplified",
            Tendency::None => "none",
        }
    }

    /// The tendencies of annotators `1..=n`: the first `n - 1` biased
    /// tendencies of [`Tendency::ORDER`] followed by `none`, so a faithful
    /// annotator is always present (`n = 2` gives dilated and none).
    pub fn for_annotators(n: usize) -> Result<Vec<Tendency>> {
        if n == 0 || n > Self::ORDER.len() {
            return Err(TaxError::Config(format!("number of annotators must be in 1..=4, got {n}")));
        }
        let mut out = Self::ORDER[..n - 1].to_vec();
        out.push(Tendency::None);
        Ok(out)
    }
}

impl fmt::Display for Tendency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tendency {
    type Err = TaxError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ORDER
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| TaxError::Invalid(format!("unknown tendency '{s}' (expected dilated, eroded, simplified or none)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorphParams {
    /// Structuring-element radius for dilation and erosion.
    pub radius: usize,
    /// Cell size for simplification.
    pub block: usize,
}

impl Default for MorphParams {
    fn default() -> Self {
        MorphParams { radius: 2, block: 4 }
    }
}

/// Applies `tendency` to every foreground class of `mask`, in increasing
/// class order. For dilation this means a background pixel claimed by two
/// classes goes to the lower one.
pub fn manipulate(mask: &Mask, tendency: Tendency, params: MorphParams) -> Result<Mask> {
    let top = mask.data.iter().copied().max().unwrap_or(0);
    let classes = || 1..=top;
    match tendency {
        Tendency::None => Ok(mask.clone()),
        Tendency::Simplified => simplify(mask, params.block),
        Tendency::Dilated => {
            let se = StructuringElement::square(params.radius)?;
            classes().try_fold(mask.clone(), |m, c| dilate(&m, c, se))
        }
        Tendency::Eroded => {
            let se = StructuringElement::square(params.radius)?;
            classes().try_fold(mask.clone(), |m, c| erode(&m, c, se))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&[u8]]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        Mask::from_vec(h, w, rows.concat()).unwrap()
    }

    #[test]
    fn dilate_center_pixel() {
        let mut m = Mask::new(5, 5);
        m.set(2, 2, 1);
        let d = dilate(&m, 1, StructuringElement::square(1).unwrap()).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let inside = (1..=3).contains(&y) && (1..=3).contains(&x);
                assert_eq!(d.get(y, x), inside as u8, "({y},{x})");
            }
        }
    }

    #[test]
    fn erode_block_to_center() {
        let m = mask(&[
            &[0, 0, 0, 0, 0],
            &[0, 1, 1, 1, 0],
            &[0, 1, 1, 1, 0],
            &[0, 1, 1, 1, 0],
            &[0, 0, 0, 0, 0],
        ]);
        let e = erode(&m, 1, StructuringElement::square(1).unwrap()).unwrap();
        assert_eq!(e.count(1), 1);
        assert_eq!(e.get(2, 2), 1);
    }

    #[test]
    fn dilate_never_overwrites_other_class() {
        let m = mask(&[&[1, 0, 2]]);
        let d = dilate(&m, 1, StructuringElement::square(1).unwrap()).unwrap();
        assert_eq!(d.data, vec![1, 1, 2]);
        let both = manipulate(&m, Tendency::Dilated, MorphParams { radius: 1, block: 1 }).unwrap();
        assert_eq!(both.data, vec![1, 1, 2]);
    }

    #[test]
    fn background_class_is_rejected() {
        let m = Mask::new(2, 2);
        let se = StructuringElement::square(1).unwrap();
        assert!(dilate(&m, 0, se).is_err());
        assert!(erode(&m, 0, se).is_err());
        assert!(StructuringElement::square(0).is_err());
    }

    #[test]
    fn simplify_majority_and_ties() {
        // 9 background / 7 foreground.
        let mut m = Mask::new(4, 4);
        for i in 0..7 {
            m.data[i] = 1;
        }
        assert_eq!(simplify(&m, 4).unwrap().count(0), 16);
        // 8 / 8 tie goes to the smaller label.
        for i in 0..8 {
            m.data[i] = 1;
        }
        assert_eq!(simplify(&m, 4).unwrap().count(0), 16);
        m.data[8] = 1;
        assert_eq!(simplify(&m, 4).unwrap().count(1), 16);
        assert!(simplify(&m, 3).is_err());
    }

    #[test]
    fn simplify_is_identity_on_cell_constant_masks() {
        let m = mask(&[&[1, 1, 2, 2], &[1, 1, 2, 2], &[0, 0, 1, 1], &[0, 0, 1, 1]]);
        assert_eq!(simplify(&m, 2).unwrap(), m);
    }

    #[test]
    fn tendency_names_roundtrip() {
        for t in Tendency::ORDER {
            assert_eq!(t.name().parse::<Tendency>().unwrap(), t);
        }
        assert!("blurred".parse::<Tendency>().is_err());
        assert_eq!(Tendency::for_annotators(2).unwrap(), vec![Tendency::Dilated, Tendency::None]);
        assert_eq!(Tendency::for_annotators(4).unwrap(), Tendency::ORDER.to_vec());
    }

    #[test]
    fn none_is_identity() {
        let m = mask(&[&[0, 1, 2], &[2, 1, 0]]);
        assert_eq!(manipulate(&m, Tendency::None, MorphParams::default()).unwrap(), m);
    }
}
