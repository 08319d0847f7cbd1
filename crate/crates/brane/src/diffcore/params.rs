//! Flat parameter storage with a layer-ordered block layout.

use crate::diffcore::DiffError;

/// Handle to one named parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockId(pub(crate) usize);

/// Placement of one block inside the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    /// 1-based layer index. Blocks are stored sorted by `(layer, name)`, so
    /// every layer suffix is contiguous.
    pub layer: usize,
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BlockSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// All parameters of a model, flattened. The block table maps
/// `(layer, name)` to an offset and shape; the data for layers `l..=L` is
/// always the contiguous suffix starting at [`ParamStore::suffix_offset`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub seed: u64,
    data: Vec<f64>,
    blocks: Vec<BlockSpec>,
    num_layers: usize,
}

pub struct ParamStoreBuilder {
    blocks: Vec<(usize, String, usize, usize)>,
}

impl ParamStoreBuilder {
    pub fn new() -> Self {
        ParamStoreBuilder { blocks: Vec::new() }
    }

    /// Declares a `rows x cols` block on `layer` (1-based). Names must be
    /// unique; insertion order does not matter.
    pub fn block(&mut self, layer: usize, name: &str, rows: usize, cols: usize) -> &mut Self {
        assert!(layer >= 1, "layers are 1-based");
        assert!(rows > 0 && cols > 0, "blocks must be non-empty");
        assert!(
            self.blocks.iter().all(|(_, n, _, _)| n != name),
            "duplicate block name {name}"
        );
        self.blocks.push((layer, name.to_string(), rows, cols));
        self
    }

    /// Finalizes the layout (sorted by layer, then name) with zeroed data.
    pub fn build(mut self, seed: u64) -> ParamStore {
        self.blocks.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut offset = 0;
        let mut num_layers = 0;
        for (layer, name, rows, cols) in self.blocks {
            num_layers = num_layers.max(layer);
            blocks.push(BlockSpec { layer, name, offset, rows, cols });
            offset += rows * cols;
        }
        ParamStore { seed, data: vec![0.0; offset], blocks, num_layers }
    }
}

impl Default for ParamStoreBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub(crate) fn from_parts(
        seed: u64,
        blocks: Vec<BlockSpec>,
        data: Vec<f64>,
    ) -> Result<ParamStore, DiffError> {
        let mut offset = 0;
        let mut num_layers = 0;
        for pair in blocks.windows(2) {
            if (pair[1].layer, &pair[1].name) <= (pair[0].layer, &pair[0].name) {
                return Err(DiffError::Checkpoint("blocks not sorted by (layer, name)".into()));
            }
        }
        for b in &blocks {
            if b.offset != offset {
                return Err(DiffError::Checkpoint(format!(
                    "block {} offset {} breaks contiguity (expected {offset})",
                    b.name, b.offset
                )));
            }
            offset += b.len();
            num_layers = num_layers.max(b.layer);
        }
        if data.len() != offset {
            return Err(DiffError::Checkpoint(format!(
                "data length {} does not match layout length {offset}",
                data.len()
            )));
        }
        Ok(ParamStore { seed, data, blocks, num_layers })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Highest layer index any block uses.
    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn find(&self, name: &str) -> Option<BlockId> {
        self.blocks.iter().position(|b| b.name == name).map(BlockId)
    }

    pub fn spec(&self, id: BlockId) -> &BlockSpec {
        &self.blocks[id.0]
    }

    pub fn slice(&self, id: BlockId) -> &[f64] {
        let b = &self.blocks[id.0];
        &self.data[b.offset..b.offset + b.len()]
    }

    pub fn slice_mut(&mut self, id: BlockId) -> &mut [f64] {
        let b = &self.blocks[id.0];
        &mut self.data[b.offset..b.offset + b.len()]
    }

    /// Start of the contiguous suffix holding every block with layer >= `l`.
    /// `l = 1` gives offset 0 (the whole vector).
    pub fn suffix_offset(&self, l: usize) -> Result<usize, DiffError> {
        if l < 1 || l > self.num_layers {
            return Err(DiffError::BadLayerIndex { given: l, max: self.num_layers });
        }
        Ok(self
            .blocks
            .iter()
            .find(|b| b.layer >= l)
            .map(|b| b.offset)
            .unwrap_or(self.data.len()))
    }

    /// Length of the layer-`l` suffix.
    pub fn suffix_len(&self, l: usize) -> Result<usize, DiffError> {
        Ok(self.data.len() - self.suffix_offset(l)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut b = ParamStoreBuilder::new();
        b.block(2, "mid", 2, 3);
        b.block(1, "first.b", 1, 4);
        b.block(1, "first.a", 2, 2);
        b.block(3, "last", 1, 1);
        b.build(7)
    }

    #[test]
    fn layout_is_sorted_and_contiguous() {
        let s = sample();
        let names: Vec<&str> = s.blocks().iter().map(|b| b.name.as_str()).collect();
        assert_eq!(names, vec!["first.a", "first.b", "mid", "last"]);
        assert_eq!(s.len(), 4 + 4 + 6 + 1);
        let offsets: Vec<usize> = s.blocks().iter().map(|b| b.offset).collect();
        assert_eq!(offsets, vec![0, 4, 8, 14]);
        assert_eq!(s.num_layers(), 3);
    }

    #[test]
    fn suffixes_are_contiguous_tails() {
        let s = sample();
        assert_eq!(s.suffix_offset(1).unwrap(), 0);
        assert_eq!(s.suffix_offset(2).unwrap(), 8);
        assert_eq!(s.suffix_offset(3).unwrap(), 14);
        assert_eq!(s.suffix_len(2).unwrap(), 7);
        assert!(matches!(s.suffix_offset(0), Err(DiffError::BadLayerIndex { .. })));
        assert!(matches!(s.suffix_offset(4), Err(DiffError::BadLayerIndex { .. })));
    }

    #[test]
    fn block_slices_map_to_offsets() {
        let mut s = sample();
        let mid = s.find("mid").unwrap();
        s.slice_mut(mid).copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(&s.data()[8..14], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(s.spec(mid).rows, 2);
    }

    #[test]
    #[should_panic(expected = "duplicate block name")]
    fn duplicate_names_rejected() {
        let mut b = ParamStoreBuilder::new();
        b.block(1, "x", 1, 1);
        b.block(2, "x", 1, 1);
    }
}
