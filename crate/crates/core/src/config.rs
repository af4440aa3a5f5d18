//! Pipeline configuration: every tunable lives in one plain struct that can
//! be round-tripped through a flat `key = value` text file (`#` comments).
//! Unknown keys are rejected so typos fail loudly instead of silently
//! training with defaults.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Master RNG seed; every stochastic choice in the pipeline derives from it.
    pub seed: u64,

    // --- partitioning ---
    /// Ground-plane grid resolution.
    pub grid_nx: usize,
    pub grid_ny: usize,
    /// A view joins a block's training set when strictly more than this many
    /// block points are visible in it.
    pub tau_p: usize,
    /// Visibility-mask splat cell size and dilation radius, in pixels.
    pub mask_cell_px: usize,
    pub mask_dilation_px: usize,

    // --- anchors / level-of-detail ---
    pub feature_dim: usize,
    pub k_offsets: usize,
    /// Base gradient threshold for splitting, decayed by `eta` every
    /// `window_m` iterations.
    pub tau_g0: f64,
    pub eta: f64,
    /// Multiplier on the decayed threshold for level-transition events.
    pub beta: f64,
    /// Lifecycle window: split/transition/prune run every this many iterations.
    pub window_m: usize,
    /// Anchors seen in fewer than this many iterations per window are pruned.
    pub eps_c: u64,

    // --- rendering ---
    pub near_plane: f64,
    /// Gaussians are rasterized inside a bounding box of this many standard
    /// deviations of their projected covariance.
    pub support_sigma: f64,
    /// Front-to-back compositing stops once transmittance drops below this.
    pub min_transmittance: f64,
    /// Frustum guard band for anchor selection, as a fraction of image size.
    pub guard_band: f64,
    pub background_r: f64,
    pub background_g: f64,
    pub background_b: f64,

    // --- loss ---
    pub lambda_l1: f64,
    pub gamma_ssim: f64,
    pub theta_levels: f64,
    /// Accumulated-opacity threshold (strict >) for level supervision masks.
    pub opacity_mask_threshold: f64,

    // --- training ---
    pub iterations: usize,
    pub hidden_dim: usize,
    pub lr_offsets: f64,
    pub lr_features: f64,
    pub lr_scaling: f64,
    pub lr_decoder: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            grid_nx: 2,
            grid_ny: 2,
            tau_p: 800,
            mask_cell_px: 16,
            mask_dilation_px: 16,
            feature_dim: 16,
            k_offsets: 5,
            tau_g0: 2e-6,
            eta: 0.8,
            beta: 4.0,
            window_m: 5000,
            eps_c: 5,
            near_plane: 0.01,
            support_sigma: 3.0,
            min_transmittance: 1e-4,
            guard_band: 0.1,
            background_r: 0.0,
            background_g: 0.0,
            background_b: 0.0,
            lambda_l1: 0.2,
            gamma_ssim: 0.8,
            theta_levels: 0.02,
            opacity_mask_threshold: 0.5,
            iterations: 2000,
            hidden_dim: 32,
            lr_offsets: 1e-2,
            lr_features: 5e-3,
            lr_scaling: 5e-3,
            lr_decoder: 2e-3,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident : $kind:ident),+ $(,)?) => {
        impl PipelineConfig {
            /// Applies `key = value` overrides from flat text. Later lines win.
            pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
                for (lineno, raw) in text.lines().enumerate() {
                    let line = raw.split('#').next().unwrap_or("").trim();
                    if line.is_empty() {
                        continue;
                    }
                    let (k, v) = line.split_once('=').ok_or_else(|| {
                        Error::parse(origin, lineno + 1, "expected `key = value`")
                    })?;
                    let (k, v) = (k.trim(), v.trim());
                    match k {
                        $(stringify!($key) => {
                            self.$key = v.parse().map_err(|_| Error::parse(
                                origin,
                                lineno + 1,
                                format!("cannot parse {:?} as {} for key `{}`", v, stringify!($kind), k),
                            ))?;
                        })+
                        _ => {
                            return Err(Error::parse(
                                origin,
                                lineno + 1,
                                format!("unknown configuration key `{}`", k),
                            ));
                        }
                    }
                }
                Ok(())
            }

            /// Serializes every key in declaration order.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(writeln!(s, "{} = {}", stringify!($key), self.$key).unwrap();)+
                s
            }
        }
    };
}

config_keys! {
    seed: u64,
    grid_nx: usize,
    grid_ny: usize,
    tau_p: usize,
    mask_cell_px: usize,
    mask_dilation_px: usize,
    feature_dim: usize,
    k_offsets: usize,
    tau_g0: f64,
    eta: f64,
    beta: f64,
    window_m: usize,
    eps_c: u64,
    near_plane: f64,
    support_sigma: f64,
    min_transmittance: f64,
    guard_band: f64,
    background_r: f64,
    background_g: f64,
    background_b: f64,
    lambda_l1: f64,
    gamma_ssim: f64,
    theta_levels: f64,
    opacity_mask_threshold: f64,
    iterations: usize,
    hidden_dim: usize,
    lr_offsets: f64,
    lr_features: f64,
    lr_scaling: f64,
    lr_decoder: f64,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        cfg.apply_file(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Cross-field checks; call after any batch of overrides.
    pub fn validate(&self) -> Result<()> {
        if (self.lambda_l1 + self.gamma_ssim - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "lambda_l1 + gamma_ssim must equal 1 (got {} + {})",
                self.lambda_l1, self.gamma_ssim
            )));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Config(format!("eta must lie in (0,1), got {}", self.eta)));
        }
        if self.beta <= 1.0 {
            return Err(Error::Config(format!("beta must exceed 1, got {}", self.beta)));
        }
        for (name, v) in [
            ("tau_g0", self.tau_g0),
            ("theta_levels", self.theta_levels),
            ("opacity_mask_threshold", self.opacity_mask_threshold),
            ("support_sigma", self.support_sigma),
            ("min_transmittance", self.min_transmittance),
            ("guard_band", self.guard_band),
            ("near_plane", self.near_plane),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{} must be finite and >= 0, got {}", name, v)));
            }
        }
        for (name, v) in [
            ("lr_offsets", self.lr_offsets),
            ("lr_features", self.lr_features),
            ("lr_scaling", self.lr_scaling),
            ("lr_decoder", self.lr_decoder),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{} must be positive, got {}", name, v)));
            }
        }
        if self.grid_nx == 0 || self.grid_ny == 0 {
            return Err(Error::Config("grid_nx and grid_ny must be at least 1".into()));
        }
        if self.window_m == 0 {
            return Err(Error::Config("window_m must be at least 1".into()));
        }
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.k_offsets == 0 {
            return Err(Error::Config("feature_dim, hidden_dim, k_offsets must be >= 1".into()));
        }
        if self.mask_cell_px == 0 {
            return Err(Error::Config("mask_cell_px must be >= 1".into()));
        }
        Ok(())
    }

    pub fn background(&self) -> nalgebra::Vector3<f64> {
        nalgebra::Vector3::new(self.background_r, self.background_g, self.background_b)
    }
}
