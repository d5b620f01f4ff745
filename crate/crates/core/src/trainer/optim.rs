/// Linear warm-up to `base_lr` over `warmup` steps, then `base_lr * sqrt(warmup / step)`.
/// `step` counts from 1; `warmup = 0` gives a constant rate.
pub fn lr_schedule(step: u64, base_lr: f64, warmup: u64) -> f64 {
    if warmup == 0 {
        return base_lr;
    }
    let s = step.max(1) as f64;
    let w = warmup as f64;
    if step <= warmup {
        base_lr * s / w
    } else {
        base_lr * (w / s).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. `count` is the number of updates this
/// parameter has received before this one.
pub fn adam_update(opt: &Adam, param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], count: &mut u64, lr: f64) {
    *count += 1;
    let c1 = 1.0 - opt.beta1.powf(*count as f64);
    let c2 = 1.0 - opt.beta2.powf(*count as f64);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
        v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] -= lr * mh / (vh.sqrt() + opt.eps);
    }
}
