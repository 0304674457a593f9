//! Versioned JSON model file: active paths, per-path cluster models and
//! per-gate predictors, stamped with a hash of the topology they were fit on.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path as FsPath;

use anyhow::{bail, Context, Result};
use quee_core::discretizer::{DiscretizerModel, PathClusterModel};
use quee_core::harness::TrainedModels;
use quee_core::path_space::{NetworkTopology, Path, PathSet};
use quee_core::predictor::{GateModels, GatePredictor, Layout, OutputActivation};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FORMAT: &str = "quee-model";
pub const VERSION: u32 = 1;

/// SHA-256 over the exact bit patterns of the block FLOPS and the bit-widths.
pub fn topology_hash(topology: &NetworkTopology) -> String {
    let mut h = Sha256::new();
    h.update((topology.num_exits() as u64).to_le_bytes());
    for f in topology.block_flops() {
        h.update(f.to_bits().to_le_bytes());
    }
    for b in topology.bit_widths() {
        h.update(b.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterDto {
    path: String,
    centroids: Vec<Vec<f64>>,
    delegates: Vec<f64>,
    member_counts: Vec<usize>,
    fallback_delegate: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiscretizerDto {
    k: usize,
    seed: u64,
    paths: Vec<ClusterDto>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GateDto {
    gate: usize,
    feature_dim: usize,
    encoding_dim: usize,
    embedding_dim: Option<usize>,
    hidden_dim: usize,
    output: String,
    params: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDto {
    format: String,
    version: u32,
    topology_hash: String,
    paths: Vec<String>,
    discretizer: DiscretizerDto,
    gates: Vec<GateDto>,
}

/// Everything the router needs at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub path_set: PathSet,
    pub models: TrainedModels,
}

fn output_name(o: OutputActivation) -> &'static str {
    match o {
        OutputActivation::Sigmoid => "sigmoid",
        OutputActivation::Identity => "identity",
    }
}

impl ModelBundle {
    fn to_dto(&self, topology: &NetworkTopology) -> ModelDto {
        let d = &self.models.discretizer;
        ModelDto {
            format: FORMAT.into(),
            version: VERSION,
            topology_hash: topology_hash(topology),
            paths: self.path_set.iter().map(Path::key).collect(),
            discretizer: DiscretizerDto {
                k: d.k,
                seed: d.seed,
                paths: d
                    .paths
                    .values()
                    .map(|m| ClusterDto {
                        path: m.path.key(),
                        centroids: m.centroids.clone(),
                        delegates: m.delegates.clone(),
                        member_counts: m.member_counts.clone(),
                        fallback_delegate: m.fallback_delegate,
                    })
                    .collect(),
            },
            gates: self
                .models
                .gates
                .gates
                .values()
                .map(|g| GateDto {
                    gate: g.gate,
                    feature_dim: g.layout.feature_dim,
                    encoding_dim: g.layout.encoding_dim,
                    embedding_dim: g.layout.embedding_dim,
                    hidden_dim: g.layout.hidden_dim,
                    output: output_name(g.output).into(),
                    params: g.params.clone(),
                })
                .collect(),
        }
    }

    fn from_dto(dto: ModelDto, topology: &NetworkTopology) -> Result<Self> {
        if dto.format != FORMAT {
            bail!("unknown model format `{}`, expected `{FORMAT}`", dto.format);
        }
        if dto.version != VERSION {
            bail!("unsupported model version {}, expected {VERSION}", dto.version);
        }
        let expected = topology_hash(topology);
        if dto.topology_hash != expected {
            bail!(
                "model was fit on a different topology (hash {}, current {expected})",
                dto.topology_hash
            );
        }
        let paths = dto
            .paths
            .iter()
            .map(|k| {
                let p: Path = k.parse()?;
                topology.check_path(&p)?;
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        let path_set = PathSet::from_paths(paths);
        let mut clusters = BTreeMap::new();
        for c in dto.discretizer.paths {
            let path: Path = c.path.parse()?;
            let k = c.centroids.len();
            if c.delegates.len() != k || c.member_counts.len() != k {
                bail!("cluster model for {path}: centroid, delegate and count lengths differ");
            }
            clusters.insert(
                path.clone(),
                PathClusterModel {
                    path,
                    centroids: c.centroids,
                    delegates: c.delegates,
                    member_counts: c.member_counts,
                    fallback_delegate: c.fallback_delegate,
                },
            );
        }
        if let Some(p) = path_set.iter().find(|p| !clusters.contains_key(*p)) {
            bail!("model file has no cluster model for active path {p}");
        }
        let mut gates = BTreeMap::new();
        for g in dto.gates {
            let layout = Layout {
                feature_dim: g.feature_dim,
                encoding_dim: g.encoding_dim,
                embedding_dim: g.embedding_dim,
                hidden_dim: g.hidden_dim,
            };
            if g.params.len() != layout.num_params() {
                bail!(
                    "gate {}: expected {} parameters, found {}",
                    g.gate,
                    layout.num_params(),
                    g.params.len()
                );
            }
            let output = match g.output.as_str() {
                "sigmoid" => OutputActivation::Sigmoid,
                "identity" => OutputActivation::Identity,
                other => bail!("gate {}: unknown output activation `{other}`", g.gate),
            };
            gates.insert(
                g.gate,
                GatePredictor {
                    gate: g.gate,
                    layout,
                    output,
                    params: g.params,
                },
            );
        }
        Ok(Self {
            path_set,
            models: TrainedModels {
                discretizer: DiscretizerModel {
                    k: dto.discretizer.k,
                    seed: dto.discretizer.seed,
                    paths: clusters,
                },
                gates: GateModels { gates },
            },
        })
    }

    pub fn write(&self, topology: &NetworkTopology, out: impl Write) -> Result<()> {
        let mut w = BufWriter::new(out);
        serde_json::to_writer(&mut w, &self.to_dto(topology))?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn read(input: impl Read, topology: &NetworkTopology) -> Result<Self> {
        let dto: ModelDto = serde_json::from_reader(input).context("malformed model file")?;
        Self::from_dto(dto, topology)
    }

    pub fn save(&self, topology: &NetworkTopology, path: &FsPath) -> Result<()> {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        self.write(topology, f)
    }

    pub fn load(path: &FsPath, topology: &NetworkTopology) -> Result<Self> {
        let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        Self::read(BufReader::new(f), topology).with_context(|| format!("loading {}", path.display()))
    }
}
