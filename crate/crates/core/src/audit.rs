//! Token budgets and analytical multiply-accumulate counts.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::config::{Config, DimPreset, QueryBudget};
use crate::error::{Error, Result};

pub const REPORT_VERSION: u32 = 1;

/// Token counts entering the SC-Attn sequence plus the dense counts they
/// replace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub views: usize,
    pub patches_per_view: usize,
    pub obj_per_view: usize,
    pub agg: usize,
    pub dyn_per_view: usize,
    pub dep: usize,
    pub action: usize,
    pub instruction: usize,
}

impl TokenBudget {
    /// Backbone sizes from the published model: 3 views of 256 patches,
    /// 32 kept per view, 64 aggregation tokens, chunk 8.
    pub fn paper(query: QueryBudget, instruction: usize) -> Self {
        let dep = match query {
            QueryBudget::Sixteen => 4,
            QueryBudget::Eighteen => 6,
        };
        TokenBudget {
            views: 3,
            patches_per_view: 256,
            obj_per_view: 32,
            agg: 64,
            dyn_per_view: 4,
            dep,
            action: 8,
            instruction,
        }
    }

    /// The budget actually instantiated by `cfg`, one instruction token.
    pub fn toy(cfg: &Config) -> Self {
        TokenBudget {
            views: cfg.world.n_views,
            patches_per_view: cfg.world.patches(),
            obj_per_view: cfg.aligner.k,
            agg: cfg.fuser.n_agg,
            dyn_per_view: cfg.thinker.n_dyn,
            dep: cfg.thinker.n_dep,
            action: cfg.world.chunk,
            instruction: 1,
        }
    }

    pub fn for_preset(cfg: &Config, preset: DimPreset) -> Self {
        match preset {
            DimPreset::Toy => Self::toy(cfg),
            DimPreset::PaperDims => Self::paper(cfg.audit.query_budget, cfg.audit.paper_instruction_tokens),
        }
    }

    pub fn obj(&self) -> usize {
        self.views * self.obj_per_view
    }

    pub fn dense(&self) -> usize {
        self.views * self.patches_per_view
    }

    pub fn queries(&self) -> usize {
        self.views * self.dyn_per_view + self.dep
    }

    /// Sequence length with selection and aggregation.
    pub fn sparse_len(&self) -> usize {
        self.obj() + self.agg + self.instruction + self.queries() + self.action
    }

    /// Sequence length with every patch token kept and no aggregation.
    pub fn dense_len(&self) -> usize {
        self.dense() + self.instruction + self.queries() + self.action
    }
}

/// An exact fraction, carried alongside its decimal value for readers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub numerator: u64,
    pub denominator: u64,
}

impl Fraction {
    fn of(n: usize, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::contract("ratio with zero denominator"));
        }
        let r = Ratio::new(n as u64, d as u64);
        Ok(Fraction {
            numerator: *r.numer(),
            denominator: *r.denom(),
        })
    }

    pub fn ratio(&self) -> Ratio<u64> {
        Ratio::new(self.numerator, self.denominator)
    }

    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

impl std::fmt::Display for Fraction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub format_version: u32,
    pub preset: DimPreset,
    pub tokens: TokenBudget,
    /// Kept object tokens per view over patches per view.
    pub obj_ratio: Fraction,
    /// Aggregation tokens over all patch tokens.
    pub agg_ratio: Fraction,
    pub query_tokens: usize,
    pub sequence_len: usize,
    pub query_share: Fraction,
}

pub fn audit_budget(cfg: &Config, preset: DimPreset) -> Result<BudgetReport> {
    let t = TokenBudget::for_preset(cfg, preset);
    Ok(BudgetReport {
        format_version: REPORT_VERSION,
        preset,
        tokens: t,
        obj_ratio: Fraction::of(t.obj_per_view, t.patches_per_view)?,
        agg_ratio: Fraction::of(t.agg, t.dense())?,
        query_tokens: t.queries(),
        sequence_len: t.sparse_len(),
        query_share: Fraction::of(t.queries(), t.sparse_len())?,
    })
}

/// Width, FFN width and depth of the stack the SC-Attn sequence runs through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackDims {
    pub d_model: u64,
    pub d_ff: u64,
    pub layers: u64,
}

impl StackDims {
    /// A 7B LLaMA-style backbone.
    pub const PAPER: StackDims = StackDims {
        d_model: 4096,
        d_ff: 11008,
        layers: 32,
    };

    pub fn toy(cfg: &Config) -> Self {
        StackDims {
            d_model: cfg.encoders.d_model as u64,
            d_ff: (cfg.encoders.ffn_mult * cfg.encoders.d_model) as u64,
            layers: cfg.thinker.layers as u64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCount {
    pub tokens: u64,
    pub attention: u64,
    pub ffn: u64,
    pub total: u64,
}

/// Per layer: `4 n d^2 + 2 n^2 d` for attention, `2 n d d_ff` for the FFN.
pub fn stack_macs(n: u64, dims: StackDims) -> MacCount {
    let d = dims.d_model;
    let attention = dims.layers * (4 * n * d * d + 2 * n * n * d);
    let ffn = dims.layers * 2 * n * d * dims.d_ff;
    MacCount {
        tokens: n,
        attention,
        ffn,
        total: attention + ffn,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub format_version: u32,
    pub preset: DimPreset,
    pub dims: StackDims,
    pub with_e3d: MacCount,
    pub without_e3d: MacCount,
    /// `with_e3d.total / without_e3d.total`; `None` for an empty stack.
    pub ratio: Option<f64>,
}

pub fn flops_for(preset: DimPreset, dims: StackDims, tokens: &TokenBudget) -> FlopsReport {
    let with_e3d = stack_macs(tokens.sparse_len() as u64, dims);
    let without_e3d = stack_macs(tokens.dense_len() as u64, dims);
    FlopsReport {
        format_version: REPORT_VERSION,
        preset,
        dims,
        with_e3d,
        without_e3d,
        ratio: (without_e3d.total > 0).then(|| with_e3d.total as f64 / without_e3d.total as f64),
    }
}

pub fn audit_flops(cfg: &Config, preset: DimPreset) -> Result<FlopsReport> {
    let tokens = TokenBudget::for_preset(cfg, preset);
    let dims = match preset {
        DimPreset::Toy => StackDims::toy(cfg),
        DimPreset::PaperDims => StackDims::PAPER,
    };
    Ok(flops_for(preset, dims, &tokens))
}
