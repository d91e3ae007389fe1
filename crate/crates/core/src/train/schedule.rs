use super::config::TrainConfig;

/// Step decay: `lr0 * factor^-(t / every)`.
pub fn lr_at(t: u64, config: &TrainConfig) -> f64 {
    let drops = (t / config.lr_decay_every) as i32;
    config.lr0 * config.lr_decay_factor.powi(-drops)
}
