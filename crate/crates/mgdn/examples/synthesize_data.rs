//! Generates a few samples of every fusion task and writes them (with
//! manifests) under `target/example-output/datasets/`.

use mgdn::data;
use mgdn::model::Task;

fn main() -> mgdn::Result<()> {
    mgdn::init_threads();
    let root = std::path::Path::new("target/example-output/datasets");
    for task in [Task::Mff, Task::Mef, Task::Hdr, Task::Gdsr] {
        let dir = root.join(task.as_str());
        let manifest = data::generate_dataset(task, 4, 42, 64, 64, &dir)?;
        let entries = data::read_manifest(&manifest)?;
        println!(
            "{}: {} samples, first has {} inputs -> {}",
            task.as_str(),
            entries.len(),
            entries[0].inputs.len(),
            manifest.display()
        );
    }
    Ok(())
}
