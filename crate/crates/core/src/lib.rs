//! Tensor engine, layers and the recursive top-down attention network.

pub mod anar;
pub mod backbones;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod kernels;
pub mod layers;
pub mod mfbn;
pub mod optim;
pub mod params;
pub mod r2dns;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use anar::{anar_param_count, AnarConfig, AnarModule, AnarVariant};
pub use backbones::{Backbone, BackboneKind, BackboneSpec, StageSpec};
pub use error::{Error, Result};
pub use layers::{Ctx, Mode};
pub use mfbn::Mfbn;
pub use optim::{Sgd, SgdConfig, StepSchedule};
pub use params::{ParamId, ParamStore};
pub use r2dns::{FlowPlan, ModelMode, R2dnsConfig, R2dnsModel};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
