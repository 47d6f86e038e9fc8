use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// One named block inside a flat parameter array, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Contiguous sequence of named blocks. Offsets are absolute positions in the
/// flat array, so a layout may start past zero when several share one vector.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    start: usize,
    entries: Vec<LayoutEntry>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::starting_at(0)
    }

    pub fn starting_at(start: usize) -> Self {
        ParamLayout {
            start,
            entries: Vec::new(),
        }
    }

    /// Appends a `rows x cols` block and returns its range.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Range<usize> {
        let entry = LayoutEntry {
            name: name.into(),
            offset: self.end(),
            rows,
            cols,
        };
        let range = entry.range();
        self.entries.push(entry);
        range
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.entries.last().map_or(self.start, |e| e.offset + e.len())
    }

    pub fn len(&self) -> usize {
        self.end() - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end()
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Concatenates layouts that tile a single flat array.
    pub fn concat(parts: &[&ParamLayout]) -> Result<ParamLayout> {
        let mut out = ParamLayout::starting_at(parts.first().map_or(0, |p| p.start));
        for part in parts {
            if part.start != out.end() {
                return Err(Error::InvalidArgument(format!(
                    "layout starting at {} does not follow previous end {}",
                    part.start,
                    out.end()
                )));
            }
            out.entries.extend(part.entries.iter().cloned());
        }
        Ok(out)
    }

    /// Structural check: entries are contiguous from `start` with no gaps.
    pub fn validate(&self) -> Result<()> {
        let mut cursor = self.start;
        for e in &self.entries {
            if e.offset != cursor {
                return Err(Error::InvalidArgument(format!(
                    "layout entry {} at offset {} expected at {}",
                    e.name, e.offset, cursor
                )));
            }
            cursor += e.len();
        }
        Ok(())
    }
}

/// Flat array of trainable scalars paired with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: ParamLayout,
}

impl ParamVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        ParamVector {
            values: vec![0.0; layout.end()],
            layout,
        }
    }

    pub fn from_values(layout: ParamLayout, values: Vec<f64>) -> Result<Self> {
        if layout.start() != 0 {
            return Err(Error::InvalidArgument(
                "a parameter vector layout must start at offset 0".into(),
            ));
        }
        layout.validate()?;
        check_dim("parameter vector", layout.len(), values.len())?;
        Ok(ParamVector { values, layout })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|e| &self.values[e.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.get(name)?.range();
        Some(&mut self.values[range])
    }

    /// Splits into named blocks, in layout order.
    pub fn unflatten(&self) -> Vec<(String, Vec<f64>)> {
        self.layout
            .entries()
            .iter()
            .map(|e| (e.name.clone(), self.values[e.range()].to_vec()))
            .collect()
    }

    /// Inverse of [`ParamVector::unflatten`].
    pub fn flatten(layout: ParamLayout, blocks: &[(String, Vec<f64>)]) -> Result<Self> {
        if blocks.len() != layout.entries().len() {
            return Err(Error::Dimension {
                context: "parameter blocks",
                expected: layout.entries().len(),
                got: blocks.len(),
            });
        }
        let mut values = Vec::with_capacity(layout.len());
        for (entry, (name, block)) in layout.entries().iter().zip(blocks) {
            if &entry.name != name {
                return Err(Error::InvalidArgument(format!(
                    "block {name} where {} was expected",
                    entry.name
                )));
            }
            check_dim("parameter block", entry.len(), block.len())?;
            values.extend_from_slice(block);
        }
        Self::from_values(layout, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_layout() -> impl Strategy<Value = ParamLayout> {
        prop::collection::vec((0usize..6, 0usize..6), 0..8).prop_map(|shapes| {
            let mut layout = ParamLayout::new();
            for (i, (r, c)) in shapes.into_iter().enumerate() {
                layout.push(format!("block{i}"), r, c);
            }
            layout
        })
    }

    proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(layout in arb_layout(), seed in any::<u64>()) {
            let values: Vec<f64> = (0..layout.len())
                .map(|i| (seed.wrapping_add(i as u64) % 1000) as f64 * 0.37 - 100.0)
                .collect();
            let pv = ParamVector::from_values(layout.clone(), values).unwrap();
            let again = ParamVector::flatten(layout, &pv.unflatten()).unwrap();
            prop_assert_eq!(pv, again);
        }
    }

    #[test]
    fn offsets_follow_push_order() {
        let mut l = ParamLayout::new();
        assert_eq!(l.push("w", 3, 2), 0..6);
        assert_eq!(l.push("b", 3, 1), 6..9);
        let mut m = ParamLayout::starting_at(l.end());
        assert_eq!(m.push("v", 1, 4), 9..13);
        let all = ParamLayout::concat(&[&l, &m]).unwrap();
        assert_eq!(all.len(), 13);
        all.validate().unwrap();
        assert!(ParamLayout::concat(&[&m, &l]).is_err());
    }

    #[test]
    fn flatten_rejects_mismatched_blocks() {
        let mut l = ParamLayout::new();
        l.push("w", 2, 2);
        assert!(ParamVector::flatten(l.clone(), &[("w".into(), vec![0.0; 3])]).is_err());
        assert!(ParamVector::flatten(l, &[("x".into(), vec![0.0; 4])]).is_err());
    }
}
