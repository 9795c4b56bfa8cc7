// End-to-end run of the archived pipeline, equivalent to the CLI sequence
//   lazymap offline && lazymap online && lazymap laplace && lazymap diagnose
// on a small linear problem where the reference posterior is analytic.

use lazymap::config::RunConfig;
use lazymap::pipeline;
use std::fs;
use std::time::Instant;

const CONFIG: &str = "\
seed = 12
[prior]
nx = 6
ny = 6
gamma = 0.4
delta = 1.0
[model]
mode = \"linear_test\"
d_y = 4
sigma2 = 0.03
[subspace]
d_r = 6
[surrogate]
objective = \"h1\"
hidden_layers = 1
width = 16
epochs = 150
batch_size = 16
lr_schedule = [{ epochs = 100, rate = 0.005 }, { epochs = 50, rate = 0.001 }]
n_train = 64
n_test = 24
[transport]
layers = 3
hidden_layers = 1
width = 16
stages = [{ iterations = 250, batch = 64, rate = 0.005 }, { iterations = 100, batch = 256, rate = 0.001 }]
[diagnostics]
n_eval = 600
[baselines.lazymap]
stages = [{ iterations = 120, batch = 16, rate = 0.005 }]
";

fn main() {
    let cfg = RunConfig::from_toml_str(CONFIG).unwrap();
    let out = std::env::temp_dir().join("lazymap-full-pipeline-demo");
    let _ = fs::remove_dir_all(&out);
    fs::create_dir_all(&out).unwrap();
    println!("writing archives under {}", out.display());

    let t = Instant::now();
    pipeline::cmd_offline(&cfg, &out, 1).unwrap();
    println!("offline phase (samples, basis, surrogate, observations): {:.2?}", t.elapsed());

    let t = Instant::now();
    pipeline::cmd_online(&cfg, &out).unwrap();
    println!("online phase (surrogate-driven transport): {:.2?}", t.elapsed());

    let t = Instant::now();
    pipeline::cmd_lazymap(&cfg, &out).unwrap();
    println!("model-driven transport baseline: {:.2?}", t.elapsed());

    let t = Instant::now();
    pipeline::cmd_laplace(&cfg, &out).unwrap();
    println!("Laplace baseline: {:.2?}", t.elapsed());

    let t = Instant::now();
    pipeline::cmd_diagnose(&cfg, &out).unwrap();
    println!("diagnostics: {:.2?}", t.elapsed());

    println!("\n{}", fs::read_to_string(out.join("diagnostics.csv")).unwrap());
    for entry in fs::read_dir(&out).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            let files = fs::read_dir(&p).unwrap().count();
            println!("{}: {} files", p.file_name().unwrap().to_string_lossy(), files);
        }
    }
}
