//! Evacuation surrogate simulator. Usage: `caravan-demo-sim <genes...> <seed>`
//! with `CARAVAN_DEMO_CITY` pointing at a city model.

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(caravan::demo::simulator_main(&args));
}
