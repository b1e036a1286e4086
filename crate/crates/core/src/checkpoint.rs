//! A checkpoint is a directory holding `graph.json` and `weights.bin`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::BlockGraph;
use crate::weights::WeightStore;

pub const GRAPH_FILE: &str = "graph.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub graph: BlockGraph,
    pub weights: WeightStore,
}

impl Checkpoint {
    pub fn new(graph: BlockGraph, weights: WeightStore) -> Self {
        Self { graph, weights }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let graph_path = dir.join(GRAPH_FILE);
        fs::write(&graph_path, self.graph.to_json()?).map_err(|e| Error::io(&graph_path, e))?;
        self.weights.save(&dir.join(WEIGHTS_FILE))
    }

    /// Loads and cross-checks graph and weights.
    pub fn load(dir: &Path) -> Result<Self> {
        let graph_path = dir.join(GRAPH_FILE);
        let text = fs::read_to_string(&graph_path).map_err(|e| Error::io(&graph_path, e))?;
        let graph = BlockGraph::from_json(&text)?;
        graph.validate()?;
        let weights = WeightStore::load(&dir.join(WEIGHTS_FILE))?;
        graph.check_weights(&weights)?;
        Ok(Self { graph, weights })
    }
}
