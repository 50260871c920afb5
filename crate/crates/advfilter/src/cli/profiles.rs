//! Named experiment presets for `reproduce`.

use crate::error::{Error, Result};

/// Minimal end-to-end run: a handful of images, two strengths, two epochs.
/// Finishes in minutes and exercises every stage.
pub const SMOKE_TOML: &str = r#"
[dataset]
source = "auto-synth"
train_size = 16
test_size = 16
num_classes = 4
image_size = 32
seed = 7
synth_style = "textures"

[threat]
base_channels = 8
epochs = 14
batch_size = 8
lr = 2e-3
seed = 1

[adv_threat]
epsilon = 5e-2
iterations = 5
epochs = 6
batch_size = 8
lr = 2e-3
seed = 2

[attack]
iterations = 40
eps_grid = [1e-3, 3e-1]
seed = 3

[denoisers.add_limg]
arch = "u_add"
loss = "image_l1"
base_channels = 8
bottleneck_channels = 32
epochs = 2
steps_per_epoch = 12
batch_size = 8
lr = 1e-3
seed = 10

[denoisers.filt_limg]
arch = "u_filt"
loss = "image_l1"
k = 5
base_channels = 8
bottleneck_channels = 32
epochs = 2
steps_per_epoch = 12
batch_size = 8
lr = 1e-3
seed = 11

[denoisers.filt_limg_star]
arch = "u_filt"
loss = "image_l1"
k = 5
base_channels = 8
bottleneck_channels = 32
epochs = 2
steps_per_epoch = 12
batch_size = 8
lr = 1e-3
seed = 12
train_eps = [3e-1]
include_clean = false

[denoisers.multihead]
arch = "u_multihead"
loss = "image_l1"
k = 5
base_channels = 8
bottleneck_channels = 32
epochs = 2
steps_per_epoch = 12
batch_size = 8
lr = 1e-3
seed = 13
include_clean = false

[denoisers.advfilter]
arch = "y_dual"
loss = "image_l1"
k = 5
base_channels = 8
bottleneck_channels = 32
epochs = 2
steps_per_epoch = 12
batch_size = 8
lr = 1e-3
seed = 14
fusion_epochs = 2
fusion_lr = 1e-3

[evaluation]
images_per_cell = 16
iteration_grid = [40, 10]
iteration_sweep_epsilon = 3e-1
seed = 4

[output]
dir = "artifacts/smoke"
"#;

/// Desk-scale run on 32×32 10-class data in the CIFAR10 layout; uses
/// `data/cifar10` when that directory exists and the deterministic
/// synthetic stand-in otherwise.
pub const DESK_CIFAR10_TOML: &str = r#"
[dataset]
source = "data/cifar10"
fallback_synth = true
train_size = 2000
test_size = 500
num_classes = 10
image_size = 32
seed = 7
synth_style = "textures"

[threat]
base_channels = 16
epochs = 30
batch_size = 64
lr = 1e-3
seed = 1

[adv_threat]
epsilon = 5e-2
iterations = 10
epochs = 16
batch_size = 64
lr = 1e-3
seed = 2

[attack]
iterations = 40
seed = 3

[denoisers.add_limg]
arch = "u_add"
loss = "image_l1"
base_channels = 16
bottleneck_channels = 64
epochs = 4
steps_per_epoch = 550
batch_size = 16
lr = 4e-4
seed = 10

[denoisers.add_lsem]
arch = "u_add"
loss = "semantic_l1"
probe_layer = "stage3"
base_channels = 16
bottleneck_channels = 64
epochs = 4
steps_per_epoch = 550
batch_size = 16
lr = 4e-4
seed = 11

[denoisers.filt_limg]
arch = "u_filt"
loss = "image_l1"
k = 5
base_channels = 16
bottleneck_channels = 64
epochs = 4
steps_per_epoch = 550
batch_size = 16
lr = 4e-4
seed = 12

[denoisers.filt_lsem]
arch = "u_filt"
loss = "semantic_l1"
probe_layer = "stage3"
k = 5
base_channels = 16
bottleneck_channels = 64
epochs = 4
steps_per_epoch = 550
batch_size = 16
lr = 4e-4
seed = 13

[denoisers.filt_limg_star]
arch = "u_filt"
loss = "image_l1"
k = 5
base_channels = 16
bottleneck_channels = 64
epochs = 4
steps_per_epoch = 550
batch_size = 16
lr = 4e-4
seed = 14
train_eps = [1e-1, 3e-1, 5e-1]
include_clean = false

[denoisers.multihead]
arch = "u_multihead"
loss = "image_l1"
k = 5
base_channels = 16
bottleneck_channels = 64
epochs = 4
steps_per_epoch = 550
batch_size = 16
lr = 4e-4
seed = 15
include_clean = false

[denoisers.advfilter]
arch = "y_dual"
loss = "image_l1"
k = 5
base_channels = 16
bottleneck_channels = 64
epochs = 4
steps_per_epoch = 550
batch_size = 16
lr = 4e-4
seed = 16
fusion_epochs = 3
fusion_lr = 1e-3

[evaluation]
images_per_cell = 500
iteration_grid = [40, 10, 30, 50, 70, 90]
iteration_sweep_epsilon = 3e-1
seed = 4

[output]
dir = "artifacts/desk-cifar10"
"#;

/// Desk-scale run in the SVHN layout (`data/svhn`), digits texture family
/// when synthesized.
pub const DESK_SVHN_TOML: &str = r#"
[dataset]
source = "data/svhn"
fallback_synth = true
train_size = 2000
test_size = 500
num_classes = 10
image_size = 32
seed = 17
synth_style = "digits"

[threat]
base_channels = 16
epochs = 30
batch_size = 64
lr = 1e-3
seed = 1

[adv_threat]
epsilon = 5e-2
iterations = 10
epochs = 16
batch_size = 64
lr = 1e-3
seed = 2

[attack]
iterations = 40
seed = 3

[denoisers.add_limg]
arch = "u_add"
loss = "image_l1"
base_channels = 16
bottleneck_channels = 64
epochs = 4
steps_per_epoch = 550
batch_size = 16
lr = 4e-4
seed = 10

[denoisers.filt_limg]
arch = "u_filt"
loss = "image_l1"
k = 5
base_channels = 16
bottleneck_channels = 64
epochs = 4
steps_per_epoch = 550
batch_size = 16
lr = 4e-4
seed = 12

[denoisers.advfilter]
arch = "y_dual"
loss = "image_l1"
k = 5
base_channels = 16
bottleneck_channels = 64
epochs = 4
steps_per_epoch = 550
batch_size = 16
lr = 4e-4
seed = 16
fusion_epochs = 3
fusion_lr = 1e-3

[evaluation]
images_per_cell = 500
iteration_grid = [40]
iteration_sweep_epsilon = 3e-1
seed = 4

[output]
dir = "artifacts/desk-svhn"
"#;

pub fn profile_toml(name: &str) -> Result<&'static str> {
    match name {
        "smoke" => Ok(SMOKE_TOML),
        "desk-cifar10" => Ok(DESK_CIFAR10_TOML),
        "desk-svhn" => Ok(DESK_SVHN_TOML),
        other => Err(Error::Config(format!(
            "unknown profile {other:?}; expected one of smoke, desk-cifar10, desk-svhn"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::ExperimentConfig;

    #[test]
    fn all_profiles_parse_and_validate() {
        for name in ["smoke", "desk-cifar10", "desk-svhn"] {
            let toml = profile_toml(name).unwrap();
            let cfg = ExperimentConfig::from_toml(toml).unwrap();
            cfg.validate().unwrap();
        }
        assert!(profile_toml("nope").is_err());
    }
}
