//! Partition of the fused input sequence into CLS / text / per-encoder
//! segments. Segment order is fixed: CLS, TEXT, then encoders in their
//! configured order.

use serde::{Deserialize, Serialize};

use crate::encoders::VeKind;
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum SegmentId {
    Cls,
    Text,
    Ve(VeKind),
}

impl SegmentId {
    pub fn label(&self) -> String {
        match self {
            SegmentId::Cls => "CLS".to_string(),
            SegmentId::Text => "TEXT".to_string(),
            SegmentId::Ve(k) => k.as_str().to_ascii_uppercase(),
        }
    }
}

impl std::fmt::Display for SegmentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySegmentMap {
    /// (segment, start, length) in sequence order.
    segments: Vec<(SegmentId, usize, usize)>,
    total_len: usize,
}

impl ModalitySegmentMap {
    /// CLS at index 0, text segment, then one segment per encoder.
    pub fn build(text_len: usize, ve_counts: &[(VeKind, usize)]) -> Result<Self> {
        if text_len == 0 {
            return Err(CoreError::Data("empty text segment".into()));
        }
        let mut segments = vec![(SegmentId::Cls, 0usize, 1usize)];
        let mut cursor = 1;
        segments.push((SegmentId::Text, cursor, text_len));
        cursor += text_len;
        for &(kind, count) in ve_counts {
            if count == 0 {
                return Err(CoreError::Data(format!("empty {kind} segment")));
            }
            segments.push((SegmentId::Ve(kind), cursor, count));
            cursor += count;
        }
        Ok(ModalitySegmentMap { segments, total_len: cursor })
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn segments(&self) -> impl Iterator<Item = (SegmentId, std::ops::Range<usize>)> + '_ {
        self.segments.iter().map(|&(id, start, len)| (id, start..start + len))
    }

    /// Segments excluding CLS (the modalities of the flow analysis).
    pub fn modalities(&self) -> impl Iterator<Item = (SegmentId, std::ops::Range<usize>)> + '_ {
        self.segments().filter(|(id, _)| *id != SegmentId::Cls)
    }

    pub fn range(&self, id: SegmentId) -> Option<std::ops::Range<usize>> {
        self.segments
            .iter()
            .find(|&&(s, _, _)| s == id)
            .map(|&(_, start, len)| start..start + len)
    }

    pub fn ve_kinds(&self) -> Vec<VeKind> {
        self.segments
            .iter()
            .filter_map(|&(id, _, _)| match id {
                SegmentId::Ve(k) => Some(k),
                _ => None,
            })
            .collect()
    }

    /// Sequence position of token index `i` within segment `id`.
    pub fn position(&self, id: SegmentId, i: usize) -> Option<usize> {
        let r = self.range(id)?;
        let pos = r.start + i;
        (pos < r.end).then_some(pos)
    }

    /// Segments are disjoint, contiguous, and cover `[0, total_len)`.
    pub fn validate(&self) -> Result<()> {
        let mut cursor = 0;
        for &(id, start, len) in &self.segments {
            if start != cursor || len == 0 {
                return Err(CoreError::Data(format!(
                    "segment {id} at {start} (len {len}) breaks contiguity at {cursor}"
                )));
            }
            cursor += len;
        }
        if cursor != self.total_len {
            return Err(CoreError::Data("segment map does not cover the sequence".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_encoder_arithmetic() {
        // 10 text tokens + 36 + 36 + 49 visual tokens + CLS = 132
        let map = ModalitySegmentMap::build(
            10,
            &[(VeKind::Region, 36), (VeKind::Grid, 36), (VeKind::Patch, 49)],
        )
        .unwrap();
        assert_eq!(map.total_len(), 132);
        assert_eq!(map.segments().count(), 5); // CLS + TEXT + 3 encoders
        map.validate().unwrap();
        assert_eq!(map.range(SegmentId::Ve(VeKind::Patch)).unwrap(), 83..132);
    }

    #[test]
    fn single_encoder_segments() {
        let map = ModalitySegmentMap::build(7, &[(VeKind::Grid, 36)]).unwrap();
        let ids: Vec<_> = map.segments().map(|(id, _)| id).collect();
        assert_eq!(ids, vec![SegmentId::Cls, SegmentId::Text, SegmentId::Ve(VeKind::Grid)]);
    }

    #[test]
    fn dropping_an_encoder_shrinks_the_sequence() {
        let both = ModalitySegmentMap::build(5, &[(VeKind::Region, 36), (VeKind::Grid, 36)]).unwrap();
        let dropped = ModalitySegmentMap::build(5, &[(VeKind::Grid, 36)]).unwrap();
        assert_eq!(both.total_len() - dropped.total_len(), 36);
        assert!(dropped.range(SegmentId::Ve(VeKind::Region)).is_none());
    }
}
