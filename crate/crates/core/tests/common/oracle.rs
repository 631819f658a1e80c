//! Naive reference implementations written straight from the metric
//! definitions, sharing no code with the library.

pub struct Plane<'a> {
    pub v: &'a [f64],
    pub h: usize,
    pub w: usize,
}

impl Plane<'_> {
    fn at(&self, y: usize, x: usize) -> f64 {
        self.v[y * self.w + x]
    }
}

pub fn mae(p: &Plane, g: &Plane) -> f64 {
    let mut s = 0.0;
    for y in 0..p.h {
        for x in 0..p.w {
            s += (p.at(y, x) - g.at(y, x)).abs();
        }
    }
    s / (p.h * p.w) as f64
}

pub fn f_beta(p: &Plane, g: &Plane) -> f64 {
    let n = (p.h * p.w) as f64;
    let total: f64 = p.v.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let tau = f64::min(2.0 * total / n, 1.0);
    let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
    for y in 0..p.h {
        for x in 0..p.w {
            let on = p.at(y, x) >= tau;
            let pos = g.at(y, x) > 0.5;
            match (on, pos) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fnn += 1.0,
                _ => {}
            }
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    let prec = tp / (tp + fp);
    let rec = tp / (tp + fnn);
    1.3 * prec * rec / (0.3 * prec + rec)
}

pub fn e_phi(p: &Plane, g: &Plane) -> f64 {
    let n = (p.h * p.w) as f64;
    let gb: Vec<f64> = g.v.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
    let fg: f64 = gb.iter().sum();
    if fg == 0.0 {
        return p.v.iter().map(|v| 1.0 - v).sum::<f64>() / n;
    }
    if fg == n {
        return p.v.iter().sum::<f64>() / n;
    }
    let pm = p.v.iter().sum::<f64>() / n;
    let gm = fg / n;
    let phi_p: Vec<f64> = p.v.iter().map(|v| v - pm).collect();
    let phi_g: Vec<f64> = gb.iter().map(|v| v - gm).collect();
    let mut enhanced = Vec::new();
    for i in 0..p.v.len() {
        let align = 2.0 * phi_p[i] * phi_g[i] / (phi_p[i].powi(2) + phi_g[i].powi(2) + 1e-8);
        enhanced.push((align + 1.0) * (align + 1.0) / 4.0);
    }
    enhanced.iter().sum::<f64>() / n
}

fn std_sample(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let ss: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (v.len() - 1) as f64).sqrt()
}

fn obj(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    2.0 * m / (m * m + 1.0 + std_sample(v) + 1e-8)
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let mx = p.iter().sum::<f64>() / n;
    let my = g.iter().sum::<f64>() / n;
    let d = if p.len() > 1 { n - 1.0 } else { 1.0 };
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cxy = 0.0;
    if p.len() > 1 {
        for i in 0..p.len() {
            vx += (p[i] - mx).powi(2) / d;
            vy += (g[i] - my).powi(2) / d;
            cxy += (p[i] - mx) * (g[i] - my) / d;
        }
    }
    let num = 4.0 * mx * my * cxy;
    let den = (mx * mx + my * my) * (vx + vy);
    if num != 0.0 {
        num / (den + 1e-8)
    } else if den == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn s_alpha(p: &Plane, g: &Plane) -> f64 {
    let (h, w) = (p.h, p.w);
    let n = (h * w) as f64;
    let gb: Vec<bool> = g.v.iter().map(|&v| v > 0.5).collect();
    let fgn = gb.iter().filter(|&&b| b).count() as f64;
    let pm = p.v.iter().sum::<f64>() / n;
    if fgn == 0.0 {
        return 1.0 - pm;
    }
    if fgn == n {
        return pm;
    }
    // Object-aware term.
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for i in 0..p.v.len() {
        if gb[i] {
            fg.push(p.v[i]);
        } else {
            bg.push(1.0 - p.v[i]);
        }
    }
    let u = fgn / n;
    let so = u * obj(&fg) + (1.0 - u) * obj(&bg);

    // Region-aware term: four blocks around the centroid.
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if gb[y * w + x] {
                sx += x as f64;
                sy += y as f64;
            }
        }
    }
    let cx = ((sx / fgn).round_ties_even() as usize + 1).min(w);
    let cy = ((sy / fgn).round_ties_even() as usize + 1).min(h);
    let mut sr = 0.0;
    for quad in 0..4 {
        let mut pv = Vec::new();
        let mut gv = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let top = y < cy;
                let left = x < cx;
                let q = match (top, left) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, true) => 2,
                    (false, false) => 3,
                };
                if q == quad {
                    pv.push(p.v[y * w + x]);
                    gv.push(if gb[y * w + x] { 1.0 } else { 0.0 });
                }
            }
        }
        if !pv.is_empty() {
            sr += pv.len() as f64 / n * ssim(&pv, &gv);
        }
    }
    f64::max(0.5 * so + 0.5 * sr, 0.0)
}
