//! Multi-branch topologies over a backbone and their shared-prefix execution.
//!
//! Zigzag (`v1`): for each split point `k` a branch runs the main blocks
//! `f0..fk` and then the shared sub-blocks `g(k+1)..gm`. Star (`v2`): every
//! sub-branch runs the main trunk `f0..fi` and then its own copy of the
//! remaining stages. Each sub-branch has its own head `fc_b`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::blocks::{build_backbone, AttentionKind, Backbone, BackboneSpec, Block, ForwardCtx, Head};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Rng, Tape, Var};

/// Where the `v1` attention module sits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// In front of every sub-block `g1..gm`, shared along with the block.
    #[default]
    EveryBlock,
    /// Once per branch, where it leaves the main path.
    Entry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Topology {
    /// Main branch only.
    Baseline,
    V1 {
        split_points: Vec<usize>,
        attention: AttentionKind,
        #[serde(default)]
        placement: Placement,
    },
    V2 {
        split_point: usize,
        branches: Vec<AttentionKind>,
    },
}

impl Topology {
    pub fn num_branches(&self) -> usize {
        match self {
            Topology::Baseline => 1,
            Topology::V1 { split_points, .. } => split_points.len() + 1,
            Topology::V2 { branches, .. } => branches.len() + 1,
        }
    }
}

/// Everything needed to rebuild a model's routing and parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDesc {
    pub backbone: BackboneSpec,
    pub topology: Topology,
}

/// One block execution on a branch path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Step {
    /// Main block `f_k`.
    Main(usize),
    /// Shared sub-block `g_k`.
    Sub(usize),
    /// Attention at the entry of `v1` branch `b` (entry placement only).
    Entry(usize),
    /// Block `j` of `v2` branch `b`.
    Star(usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchPath {
    pub steps: Vec<Step>,
    /// Head index; 0 is the main head.
    pub head: usize,
}

/// Logits and final feature maps of every branch, main branch first.
#[derive(Clone, Debug)]
pub struct BranchOutputs {
    pub logits: Vec<Var>,
    pub final_maps: Vec<Var>,
}

impl BranchOutputs {
    pub fn num_branches(&self) -> usize {
        self.logits.len()
    }
}

/// Per-class mean of all branch logits.
pub fn ensemble_logits(tape: &mut Tape, outputs: &BranchOutputs) -> Result<Var> {
    let (&first, rest) = outputs
        .logits
        .split_first()
        .ok_or_else(|| Error::Usage("ensemble of zero branches".into()))?;
    if rest.is_empty() {
        return Ok(first);
    }
    let mut sum = first;
    for &v in rest {
        sum = tape.add(sum, v)?;
    }
    Ok(tape.scale(sum, 1.0 / outputs.logits.len() as f32))
}

/// A backbone plus sub-branches, owning every parameter.
#[derive(Clone, Debug)]
pub struct EnsembleModel {
    desc: ModelDesc,
    store: ParamStore,
    main: Backbone,
    sub_blocks: Vec<Block>,
    entries: Vec<Block>,
    star: Vec<Vec<Block>>,
    sub_heads: Vec<Head>,
    paths: Vec<BranchPath>,
}

/// The pruned, main-branch-only model. Its topology is [`Topology::Baseline`].
pub type InferenceModel = EnsembleModel;

impl EnsembleModel {
    /// Builds and initializes a model. Main-branch parameters are drawn first,
    /// so every topology over the same backbone and seed shares its main-branch init.
    pub fn build(desc: ModelDesc, rng: &mut Rng) -> Result<Self> {
        let spec = &desc.backbone;
        let m = spec.depth();
        let mut store = ParamStore::new();
        let main = build_backbone(spec, "f", "fc", &mut store, rng)?;
        let shapes: Vec<_> = main.blocks.iter().map(|b| b.out_shape).collect();
        let mut sub_blocks = Vec::new();
        let mut entries = Vec::new();
        let mut star = Vec::new();
        let mut sub_heads = Vec::new();
        let mut paths = vec![BranchPath {
            steps: (0..=m).map(Step::Main).collect(),
            head: 0,
        }];
        let head = |store: &mut ParamStore, rng: &mut Rng, b: usize| {
            Head::build(&spec.head, shapes[m], spec.num_classes, &format!("fc_{b}"), store, rng)
        };

        match &desc.topology {
            Topology::Baseline => {}
            Topology::V1 {
                split_points,
                attention,
                placement,
            } => {
                validate_split_points(split_points, m)?;
                if !split_points.is_empty() {
                    for k in 1..=m {
                        let mut g = Block::build_stage(&spec.stages[k - 1], shapes[k - 1], &format!("g{k}"), &mut store, rng)?;
                        if *placement == Placement::EveryBlock {
                            g = g.with_attention(*attention, &mut store, rng)?;
                        }
                        sub_blocks.push(g);
                    }
                }
                for (i, &k) in split_points.iter().enumerate() {
                    let b = i + 1;
                    let mut steps: Vec<Step> = (0..=k).map(Step::Main).collect();
                    if *placement == Placement::Entry && *attention != AttentionKind::None {
                        let entry = Block {
                            name: format!("a{b}"),
                            layers: Vec::new(),
                            in_shape: shapes[k],
                            out_shape: shapes[k],
                            flops: 0,
                        };
                        entries.push(entry.with_attention(*attention, &mut store, rng)?);
                        steps.push(Step::Entry(entries.len() - 1));
                    }
                    steps.extend((k + 1..=m).map(Step::Sub));
                    sub_heads.push(head(&mut store, rng, b)?);
                    paths.push(BranchPath { steps, head: b });
                }
            }
            Topology::V2 {
                split_point,
                branches,
            } => {
                let i = *split_point;
                if i >= m {
                    return Err(Error::Topology(format!(
                        "split point {i} out of range: a backbone with {m} stages allows 0..={}",
                        m - 1
                    )));
                }
                for (idx, kind) in branches.iter().enumerate() {
                    let b = idx + 1;
                    let mut blocks = Vec::new();
                    for k in i + 1..=m {
                        let name = format!("l{b}.f{k}");
                        let mut block = Block::build_stage(&spec.stages[k - 1], shapes[k - 1], &name, &mut store, rng)?;
                        if k == i + 1 {
                            block = block.with_attention(*kind, &mut store, rng)?;
                        }
                        blocks.push(block);
                    }
                    let mut steps: Vec<Step> = (0..=i).map(Step::Main).collect();
                    steps.extend((0..blocks.len()).map(|j| Step::Star(idx, j)));
                    star.push(blocks);
                    sub_heads.push(head(&mut store, rng, b)?);
                    paths.push(BranchPath { steps, head: b });
                }
            }
        }

        let model = EnsembleModel {
            desc,
            store,
            main,
            sub_blocks,
            entries,
            star,
            sub_heads,
            paths,
        };
        model.check_routing()?;
        Ok(model)
    }

    /// Verifies that consecutive steps chain shapes and all branches end in one C×H×W.
    fn check_routing(&self) -> Result<()> {
        let input = {
            let s = &self.desc.backbone;
            [s.in_channels, s.input_size, s.input_size]
        };
        let final_shape = self.main.blocks.last().expect("nonempty").out_shape;
        for (b, path) in self.paths.iter().enumerate() {
            let mut shape = input;
            for &step in &path.steps {
                let block = self.block(step);
                if block.in_shape != shape {
                    return Err(Error::Topology(format!(
                        "branch {b}: block {} expects {:?} but receives {shape:?}",
                        block.name, block.in_shape
                    )));
                }
                shape = block.out_shape;
            }
            if shape != final_shape {
                return Err(Error::Topology(format!(
                    "branch {b} ends in {shape:?}, main branch in {final_shape:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn desc(&self) -> &ModelDesc {
        &self.desc
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.desc.backbone
    }

    pub fn topology(&self) -> &Topology {
        &self.desc.topology
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn main(&self) -> &Backbone {
        &self.main
    }

    pub fn paths(&self) -> &[BranchPath] {
        &self.paths
    }

    pub fn num_branches(&self) -> usize {
        self.paths.len()
    }

    pub fn block(&self, step: Step) -> &Block {
        match step {
            Step::Main(k) => &self.main.blocks[k],
            Step::Sub(k) => &self.sub_blocks[k - 1],
            Step::Entry(e) => &self.entries[e],
            Step::Star(b, j) => &self.star[b][j],
        }
    }

    pub fn head(&self, index: usize) -> &Head {
        if index == 0 {
            &self.main.head
        } else {
            &self.sub_heads[index - 1]
        }
    }

    /// Block names along branch `b`, ending with its head.
    pub fn path_names(&self, b: usize) -> Vec<String> {
        let path = &self.paths[b];
        let mut names: Vec<String> = path.steps.iter().map(|&s| self.block(s).name.clone()).collect();
        names.push(self.head(path.head).name.clone());
        names
    }

    /// Runs every branch. Each distinct path prefix is computed once, so
    /// blocks shared by several branches at the same position run once.
    pub fn forward_all(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<BranchOutputs> {
        let mut memo: HashMap<&[Step], Var> = HashMap::new();
        let mut logits = Vec::with_capacity(self.paths.len());
        let mut final_maps = Vec::with_capacity(self.paths.len());
        for path in &self.paths {
            let mut y = x;
            for end in 1..=path.steps.len() {
                let prefix = &path.steps[..end];
                y = match memo.get(prefix) {
                    Some(&v) => v,
                    None => {
                        let v = self.block(path.steps[end - 1]).forward(ctx, y)?;
                        memo.insert(prefix, v);
                        v
                    }
                };
            }
            logits.push(self.head(path.head).forward(ctx, y)?);
            final_maps.push(y);
        }
        let main_shape = ctx.tape.shape(final_maps[0]).to_vec();
        for (b, &m) in final_maps.iter().enumerate().skip(1) {
            if ctx.tape.shape(m) != main_shape.as_slice() {
                return Err(Error::Topology(format!("branch {b} final map shape differs from the main branch")));
            }
        }
        Ok(BranchOutputs { logits, final_maps })
    }

    /// Main-branch logits only.
    pub fn forward_main(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        Ok(self.main.forward(ctx, x)?.0)
    }

    /// Whether a parameter or buffer name belongs to `f0..fm` or `fc`.
    pub fn is_main_name(name: &str) -> bool {
        let first = name.split('.').next().unwrap_or("");
        first == "fc" || first.strip_prefix('f').is_some_and(|d| !d.is_empty() && d.bytes().all(|c| c.is_ascii_digit()))
    }

    /// Drops every sub-branch, keeping the main-branch parameter values unchanged.
    pub fn prune_to_main(&self) -> Result<InferenceModel> {
        let desc = ModelDesc {
            backbone: self.desc.backbone.clone(),
            topology: Topology::Baseline,
        };
        let mut scratch = crate::tensor::rng_from_seed(0);
        let mut pruned = EnsembleModel::build(desc, &mut scratch)?;
        let table: Vec<_> = self
            .store
            .named_tensors()
            .into_iter()
            .filter(|(name, _)| Self::is_main_name(name))
            .collect();
        pruned.store.load_named(&table)?;
        Ok(pruned)
    }
}

fn validate_split_points(sp: &[usize], m: usize) -> Result<()> {
    if let Some(&bad) = sp.iter().find(|&&k| k >= m) {
        return Err(Error::Topology(format!(
            "split point {bad} out of range: a backbone with {m} stages allows 0..={}",
            m - 1
        )));
    }
    if sp.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Topology(format!("split points must be strictly increasing, got {sp:?}")));
    }
    Ok(())
}

/// Zigzag topology over `spec` with split points `sp`.
pub fn build_v1(
    spec: BackboneSpec,
    sp: Vec<usize>,
    attention: AttentionKind,
    placement: Placement,
    rng: &mut Rng,
) -> Result<EnsembleModel> {
    let topology = Topology::V1 {
        split_points: sp,
        attention,
        placement,
    };
    EnsembleModel::build(ModelDesc { backbone: spec, topology }, rng)
}

/// Star topology with one sub-branch per entry of `branches`, split after block `split_point`.
pub fn build_v2(
    spec: BackboneSpec,
    split_point: usize,
    branches: Vec<AttentionKind>,
    rng: &mut Rng,
) -> Result<EnsembleModel> {
    let topology = Topology::V2 {
        split_point,
        branches,
    };
    EnsembleModel::build(ModelDesc { backbone: spec, topology }, rng)
}
