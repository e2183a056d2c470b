//! Fuses a generated multi-focus pair and dumps the per-pixel kernel grids
//! and similarity masks each stage produced.

use mgdn::data::{self, raster, SceneSpec};
use mgdn::model::{Model, ModelConfig, Task};

fn main() -> mgdn::Result<()> {
    mgdn::init_threads();
    let out = std::path::Path::new("target/example-output/fuse");
    std::fs::create_dir_all(out).map_err(|e| mgdn::MgdnError::io(out, e))?;

    let sample = data::gen_multifocus(
        &SceneSpec { seed: 7, height: 64, width: 64, primitives: 6 },
        2.0,
    );
    let model = Model::init(ModelConfig::for_task(Task::Mff), 3)?;
    let inf = model.infer(&sample.inputs)?;

    raster::write_raster(out.join("input0.png"), &sample.inputs[0])?;
    raster::write_raster(out.join("input1.png"), &sample.inputs[1])?;
    raster::write_raster(out.join("fused.png"), &inf.output)?;
    for (n, stage) in inf.stages.iter().enumerate() {
        for (i, kv) in stage.kernels.iter().enumerate() {
            raster::write_raster(out.join(format!("kv_stage{n}_s{i}.png")), &kv.render_grid(8, 8))?;
        }
        for (j, mask) in stage.masks.iter().enumerate() {
            raster::write_raster(out.join(format!("mask_stage{n}_p{j}.png")), mask)?;
        }
    }
    println!(
        "wrote fused output, {} kernel grids and {} masks under {}",
        inf.stages.len() * 2,
        inf.stages.len(),
        out.display()
    );
    Ok(())
}
