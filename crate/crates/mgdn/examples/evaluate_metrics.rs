//! Computes the quality metrics on a few synthetic pairs: the degraded
//! inputs against the ground truth, plus the oracle composite.

use mgdn::data::{self, SceneSpec};
use mgdn::metrics::{self, MetricReport, MetricRow};
use mgdn::tensor::Tensor;

fn row(id: &str, a: &Tensor, gt: &Tensor) -> mgdn::Result<MetricRow> {
    Ok(MetricRow {
        id: id.to_string(),
        psnr: metrics::psnr(a, gt, 1.0)?,
        psnr_mu: metrics::psnr_mu(a, gt, 5000.0)?,
        psnr_linear: metrics::psnr(a, gt, 1.0)?,
        ssim: metrics::ssim(a, gt)?,
        nmi: metrics::nmi_metric(a, gt, 64)?,
        entropy: metrics::entropy_metric(a, 256),
        rmse: metrics::rmse(a, gt)?,
    })
}

fn main() -> mgdn::Result<()> {
    mgdn::init_threads();
    let mut report = MetricReport::default();
    for seed in 0..3 {
        let sp = SceneSpec { seed, height: 64, width: 64, primitives: 6 };
        let s = data::gen_multifocus(&sp, 2.0);
        let mask = data::multifocus_mask(&data::render_scene(&sp).depth);
        let composite = Tensor::from_fn(s.gt.shape().to_vec(), |i| {
            if mask[i / 3] { s.inputs[0].data()[i] } else { s.inputs[1].data()[i] }
        });
        report.push(row(&format!("near-focus-{seed}"), &s.inputs[0], &s.gt)?);
        report.push(row(&format!("far-focus-{seed}"), &s.inputs[1], &s.gt)?);
        report.push(row(&format!("composite-{seed}"), &composite, &s.gt)?);
    }
    print!("{}", report.to_table());
    Ok(())
}
