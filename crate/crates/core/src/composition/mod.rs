//! Masks, the masked product target and context conditionals.

mod context;
mod mask;
mod refine;
mod target;

pub use context::{
    direct_conditionals, invert_conditionals, relative_l2, rf_invert, rf_resample, ContextConditionals, ContextSource,
    ForwardOrder, InversionMode,
};
pub use mask::{CellBox, Mask, MaskKind, MaskSet};
pub use refine::{refine_masks, smooth_mask, RefineConfig, Smoothing};
pub use target::{project, CompositeTarget, ExpertSlot, LambdaPolicy, MaskBinding, ReconStep};
