//! Checks every block's gradients against central finite differences and
//! prints the verification table (same as `mgdn gradcheck`).

fn main() -> mgdn::Result<()> {
    mgdn::init_threads();
    let ok = mgdn::cli::cmd_gradcheck()?;
    if !ok {
        std::process::exit(2);
    }
    Ok(())
}
