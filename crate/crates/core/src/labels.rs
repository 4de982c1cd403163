//! Binary image-level label vectors and the set operations used to build
//! pair supervision targets.

use crate::error::{Error, Result};

/// Presence flags for `K` classes. Bit `i` is class index `i + 1`; index 0 is
/// reserved for background in masks.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelVector {
    bits: Vec<bool>,
}

impl LabelVector {
    pub fn empty(k: usize) -> Self {
        LabelVector { bits: vec![false; k] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        LabelVector { bits }
    }

    /// Builds from 1-based class indices, as stored in the manifest.
    pub fn from_classes(k: usize, classes: &[usize]) -> Result<Self> {
        let mut v = Self::empty(k);
        for &c in classes {
            if c == 0 || c > k {
                return Err(Error::Contract(format!(
                    "class index {c} outside 1..={k}"
                )));
            }
            v.bits[c - 1] = true;
        }
        Ok(v)
    }

    pub fn num_classes(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Whether 1-based class `class` is present.
    pub fn has(&self, class: usize) -> bool {
        class >= 1 && class <= self.bits.len() && self.bits[class - 1]
    }

    /// Sorted 1-based indices of present classes.
    pub fn classes(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_zero(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    fn check_len(&self, other: &Self) -> Result<()> {
        if self.bits.len() != other.bits.len() {
            return Err(Error::Dimension(format!(
                "label vectors have {} and {} classes",
                self.bits.len(),
                other.bits.len()
            )));
        }
        Ok(())
    }

    /// Bitwise AND.
    pub fn intersect(&self, other: &Self) -> Result<Self> {
        self.check_len(other)?;
        Ok(LabelVector {
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a & b).collect(),
        })
    }

    /// `self - (self AND other)`.
    pub fn subtract(&self, other: &Self) -> Result<Self> {
        let common = self.intersect(other)?;
        Ok(LabelVector {
            bits: self
                .bits
                .iter()
                .zip(&common.bits)
                .map(|(&a, &c)| a && !c)
                .collect(),
        })
    }

    pub fn has_common(&self, other: &Self) -> Result<bool> {
        Ok(!self.intersect(other)?.is_zero())
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.check_len(other)?;
        Ok(LabelVector {
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a | b).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn lv(bits: &[u8]) -> LabelVector {
        LabelVector::from_bits(bits.iter().map(|&b| b == 1).collect())
    }

    fn from_mask(k: usize, mask: u32) -> LabelVector {
        LabelVector::from_bits((0..k).map(|i| mask >> i & 1 == 1).collect())
    }

    fn as_set(v: &LabelVector) -> BTreeSet<usize> {
        v.classes().into_iter().collect()
    }

    #[test]
    fn worked_examples() {
        assert_eq!(lv(&[1, 0, 1]).intersect(&lv(&[0, 0, 1])).unwrap(), lv(&[0, 0, 1]));
        assert_eq!(lv(&[1, 0, 1]).subtract(&lv(&[0, 0, 1])).unwrap(), lv(&[1, 0, 0]));
        let a = lv(&[1, 1, 0]);
        assert_eq!(a.intersect(&a).unwrap(), a);
        assert!(a.subtract(&a).unwrap().is_zero());
        assert!(!lv(&[1, 0, 0]).has_common(&lv(&[0, 1, 1])).unwrap());
        assert!(a.has_common(&a).unwrap());
    }

    #[test]
    fn length_mismatch_is_dimension_error() {
        let (a, b) = (lv(&[1, 0]), lv(&[1, 0, 0]));
        assert!(matches!(a.intersect(&b), Err(Error::Dimension(_))));
        assert!(matches!(a.subtract(&b), Err(Error::Dimension(_))));
        assert!(matches!(a.has_common(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn exhaustive_against_set_semantics() {
        let k = 4;
        for ma in 0..1u32 << k {
            for mb in 0..1u32 << k {
                let (a, b) = (from_mask(k, ma), from_mask(k, mb));
                let (sa, sb) = (as_set(&a), as_set(&b));
                let inter: BTreeSet<_> = sa.intersection(&sb).copied().collect();
                let diff: BTreeSet<_> = sa.difference(&sb).copied().collect();
                assert_eq!(as_set(&a.intersect(&b).unwrap()), inter);
                assert_eq!(as_set(&a.subtract(&b).unwrap()), diff);
                assert_eq!(a.has_common(&b).unwrap(), (ma & mb).count_ones() > 0);
            }
        }
    }

    #[test]
    fn class_index_round_trip() {
        let v = LabelVector::from_classes(5, &[4, 1]).unwrap();
        assert_eq!(v.classes(), vec![1, 4]);
        assert!(v.has(4) && !v.has(2) && !v.has(0) && !v.has(9));
        assert!(LabelVector::from_classes(5, &[0]).is_err());
        assert!(LabelVector::from_classes(5, &[6]).is_err());
    }

    proptest! {
        #[test]
        fn algebraic_laws(k in 1usize..10, ma in any::<u32>(), mb in any::<u32>()) {
            let (a, b) = (from_mask(k, ma), from_mask(k, mb));
            let i = a.intersect(&b).unwrap();
            let d = a.subtract(&b).unwrap();
            prop_assert_eq!(&i, &b.intersect(&a).unwrap());
            prop_assert_eq!(&a.intersect(&a).unwrap(), &a);
            prop_assert!(d.intersect(&i).unwrap().is_zero());
            prop_assert_eq!(d.union(&i).unwrap(), a);
        }
    }
}
