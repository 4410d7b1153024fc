//! Synthetic classification tasks, vector-space corruptions, source-model
//! training and the domain-arrival schedulers.

mod corruption;
mod rank;
mod schedule;
mod task;

pub use corruption::{corrupt, Corruption, CorruptionFamily, MAX_SEVERITY};
pub use rank::{rank_by_source_error, DomainError};
pub use schedule::{
    cyclic_index, default_domains, domain_eval_set, domain_stream_pool, plan, CyclicMode, Domain, EventPlan,
    Schedule, ScheduleConfig, ScheduleDescription, Setting, StreamEvent,
};
pub use task::{accuracy, make_task, train_source, LabeledSet, SyntheticTask, TaskConfig, TrainConfig};
