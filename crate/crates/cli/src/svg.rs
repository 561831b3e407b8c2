//! Static line chart of the four cost ratios against the weight rank.

use std::fmt::Write;

use wasi_core::CostReport;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;

type Series = (&'static str, &'static str, fn(&CostReport) -> f64);

/// One polyline per ratio, points in sweep order, log-scaled y.
pub fn ratio_chart(reports: &[CostReport]) -> String {
    let series: [Series; 4] = [
        ("C_training", "#1f77b4", |r| r.c_training),
        ("C_inference", "#ff7f0e", |r| r.c_inference),
        ("S_training", "#2ca02c", |r| r.s_training),
        ("S_inference", "#d62728", |r| r.s_inference),
    ];
    let ks: Vec<f64> = reports.iter().map(|r| r.shape.weight_rank as f64).collect();
    let (kmin, kmax) = ks.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &k| (a.min(k), b.max(k)));
    let vals: Vec<f64> =
        reports.iter().flat_map(|r| series.iter().map(move |s| s.2(r))).filter(|v| *v > 0.0).collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min).log10().floor();
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max).log10().ceil().max(lo + 1.0);
    let x = |k: f64| if kmax > kmin { PAD + (k - kmin) / (kmax - kmin) * (W - 2.0 * PAD) } else { W / 2.0 };
    let y = |v: f64| H - PAD - (v.max(1e-300).log10() - lo) / (hi - lo) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    for e in lo as i32..=hi as i32 {
        let yy = y(10f64.powi(e));
        let _ = writeln!(s, r#"<text x="{}" y="{yy}" text-anchor="end">1e{e}</text>"#, PAD - 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">weight rank K ({kmin} to {kmax})</text>"#, W / 2.0, H - 12.0);
    for (n, (name, colour, f)) in series.iter().enumerate() {
        let pts: Vec<String> =
            reports.iter().zip(&ks).map(|(r, &k)| format!("{:.2},{:.2}", x(k), y(f(r)))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{colour}" fill="none"/>"#, pts.join(" "));
        let ly = PAD + 14.0 * n as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{colour}">{name}</text>"#, W - PAD - 80.0);
    }
    s.push_str("</svg>\n");
    s
}
