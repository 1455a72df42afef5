//! Irregular series: data model, event files, splitting, synthetic and UCI sources.

pub mod events;
pub mod series;
pub mod split;
pub mod synth;
pub mod uci;

pub use events::{
    parse_events, read_dataset_dir, read_events_file, serialize_series, write_dataset_dir,
    write_events_file, DatasetManifest, DatasetSplits,
};
pub use series::{
    build_value_mask, normalize_times, IrregularSeries, Label, Observation, Task, TimeStep,
    ValueMask,
};
pub use split::split_dataset;
pub use synth::{synth_generate, synth_splits, SynthConfig, SynthDataset, SynthJob};
pub use uci::{convert_uci_activity, uci_splits, UciConfig, UciJob};
