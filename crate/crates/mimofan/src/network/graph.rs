//! Convolution-layer graph and automated path counting.
//!
//! The graph has one node per convolution *execution* (two per block
//! application, one per head); edges follow the data flow, so a
//! source-to-sink path corresponds to one route an input voxel can take to
//! an output head. Residual projections are shortcut internals and are not
//! counted as layers, matching the usual depth-counting convention for
//! residual networks.
//!
//! For MIMO-FAN every connection advances the depth grid by one level, so
//! all paths have the same length; the U-Net family's skip concatenations
//! create shorter side paths, and its depth is characterised by the longest
//! path together with the distinct-layer count.

use std::collections::{BTreeMap, BTreeSet};

use crate::network::{plan, Feed, NetworkConfig};

#[derive(Clone, Debug)]
struct Node {
    /// Weight tensor identity, e.g. `enc.d1.s0.conv1`.
    weight: String,
    preds: Vec<usize>,
    entry: bool,
    sink: bool,
}

/// DAG of convolution executions for one architecture configuration.
pub struct LayerGraph {
    nodes: Vec<Node>,
}

/// Conv-layer counts over all input-to-output paths.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct PathStats {
    pub min_convs: usize,
    pub max_convs: usize,
}

impl LayerGraph {
    pub fn from_config(config: &NetworkConfig) -> LayerGraph {
        let plan = plan(config);
        let mut nodes: Vec<Node> = Vec::new();
        // block application key -> index of its conv2 node
        let mut outputs: BTreeMap<String, usize> = BTreeMap::new();

        for app in &plan.apps {
            let weights = &plan.weights[app.weights];
            let mut preds = Vec::new();
            let mut entry = false;
            for feed in &app.feeds {
                match feed {
                    Feed::Pyramid(_) => entry = true,
                    Feed::App { key, .. } => preds.push(outputs[key]),
                }
            }
            let conv1 = nodes.len();
            nodes.push(Node {
                weight: format!("{}.conv1", weights.name),
                preds,
                entry,
                sink: false,
            });
            nodes.push(Node {
                weight: format!("{}.conv2", weights.name),
                preds: vec![conv1],
                entry: false,
                sink: false,
            });
            outputs.insert(app.key.clone(), conv1 + 1);
        }
        for head in &plan.heads {
            nodes.push(Node {
                weight: head.name.clone(),
                preds: vec![outputs[&head.src_key]],
                entry: false,
                sink: true,
            });
        }
        LayerGraph { nodes }
    }

    /// Minimum and maximum number of convolution layers over every path
    /// from a network input to an output head, via a linear dynamic program
    /// over the topological construction order.
    pub fn path_stats(&self) -> PathStats {
        let mut min_to = vec![usize::MAX; self.nodes.len()];
        let mut max_to = vec![0usize; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let mut lo = if node.entry { 0 } else { usize::MAX };
            let mut hi = if node.entry { 0 } else { 0 };
            for &p in &node.preds {
                lo = lo.min(min_to[p]);
                hi = hi.max(max_to[p]);
            }
            min_to[i] = lo.saturating_add(1);
            max_to[i] = hi + 1;
        }
        let mut stats = PathStats {
            min_convs: usize::MAX,
            max_convs: 0,
        };
        for (i, node) in self.nodes.iter().enumerate() {
            if node.sink {
                stats.min_convs = stats.min_convs.min(min_to[i]);
                stats.max_convs = stats.max_convs.max(max_to[i]);
            }
        }
        stats
    }

    /// Distinct convolution weight tensors in the graph (shared weights are
    /// counted once).
    pub fn conv_layer_count(&self) -> usize {
        self.conv_weight_names().len()
    }

    /// Weight-tensor names of every counted convolution, e.g.
    /// `enc.d0.shared.conv1`. Residual projections do not appear.
    pub fn conv_weight_names(&self) -> BTreeSet<String> {
        self.nodes.iter().map(|n| n.weight.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build, is_running_stat, Arch, NetworkConfig};

    #[test]
    fn mimofan_every_path_is_19_layers() {
        let config = NetworkConfig::default();
        let stats = LayerGraph::from_config(&config).path_stats();
        assert_eq!(stats, PathStats { min_convs: 19, max_convs: 19 });
    }

    #[test]
    fn mimofan_without_dcc_keeps_depth() {
        let config = NetworkConfig {
            dcc: false,
            ..NetworkConfig::default()
        };
        let stats = LayerGraph::from_config(&config).path_stats();
        assert_eq!(stats, PathStats { min_convs: 19, max_convs: 19 });
    }

    #[test]
    fn baselines_are_19_layer_networks() {
        for arch in [Arch::UNet, Arch::ResUNet] {
            let config = NetworkConfig {
                arch,
                ..NetworkConfig::default()
            };
            let graph = LayerGraph::from_config(&config);
            assert_eq!(graph.conv_layer_count(), 19, "{arch}");
            let stats = graph.path_stats();
            assert_eq!(stats.max_convs, 19, "{arch}");
            // skip concatenations create legitimate shorter side paths
            assert!(stats.min_convs < 19, "{arch}");
        }
    }

    #[test]
    fn graph_layers_match_built_parameters() {
        // every counted conv layer must exist as a weight tensor, and every
        // non-projection conv weight must be counted
        for config in [
            NetworkConfig { base_filters: 2, ..NetworkConfig::default() },
            NetworkConfig { base_filters: 2, arch: Arch::UNet, ..NetworkConfig::default() },
            NetworkConfig { base_filters: 2, arch: Arch::ResUNet, ..NetworkConfig::default() },
        ] {
            let graph = LayerGraph::from_config(&config);
            let from_graph: BTreeSet<String> = graph
                .conv_weight_names()
                .iter()
                .map(|n| format!("{n}.weight"))
                .collect();
            let params = build::<f32>(&config, 0);
            let from_params: BTreeSet<String> = params
                .iter()
                .map(|(n, _)| n.clone())
                .filter(|n| {
                    !is_running_stat(n)
                        && n.ends_with(".weight")
                        && !n.ends_with(".proj.weight")
                })
                .collect();
            assert_eq!(from_graph, from_params, "{}", config.arch);
        }
    }
}
