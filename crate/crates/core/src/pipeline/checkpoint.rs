//! Score-network checkpoints: one IVIT file per parameter block plus a
//! descriptor listing the architecture and block shapes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::score::{NetArch, ScoreNet};
use crate::sde::SdeSchedule;
use crate::tensor::{Shape, Tensor};

use super::io::{read_ivit, write_ivit};
use super::kv;

pub const DESCRIPTOR: &str = "score_net.txt";

fn block_file(name: &str) -> String {
    format!("score_{name}.ivit")
}

pub fn save_checkpoint(dir: &Path, net: &ScoreNet) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let arch = net.arch();
    let mut pairs = vec![
        ("shape".to_string(), arch.shape.to_string()),
        ("hidden".to_string(), arch.hidden.to_string()),
        ("time_features".to_string(), arch.time_features.to_string()),
        ("output".to_string(), arch.output.to_string()),
        ("seed".to_string(), net.seed().to_string()),
        (
            "schedule.beta_min".to_string(),
            format!("{:?}", net.schedule().beta_min()),
        ),
        (
            "schedule.beta_max".to_string(),
            format!("{:?}", net.schedule().beta_max()),
        ),
        ("schedule.T".to_string(), format!("{:?}", net.schedule().horizon())),
    ];
    let mut files = Vec::new();
    for (name, dims, data) in net.blocks_named() {
        let file = block_file(name);
        write_ivit(&dir.join(&file), &Tensor::new(dims.clone(), data.to_vec())?)?;
        pairs.push((
            format!("block.{name}"),
            dims.iter().map(usize::to_string).collect::<Vec<_>>().join("x"),
        ));
        files.push(file);
    }
    kv::write(&dir.join(DESCRIPTOR), &pairs)?;
    files.push(DESCRIPTOR.to_string());
    Ok(files)
}

pub fn parse_shape(s: &str) -> Result<Shape> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.parse().map_err(|_| Error::Config(format!("bad shape `{s}`"))))
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        [c, h, w] => Ok(Shape::new(*c, *h, *w)),
        _ => Err(Error::Config(format!("bad shape `{s}`, expected CxHxW"))),
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<ScoreNet> {
    let pairs = kv::read(&dir.join(DESCRIPTOR))?;
    let arch = NetArch {
        shape: parse_shape(kv::get(&pairs, "shape")?)?,
        hidden: kv::get_parsed(&pairs, "hidden")?,
        time_features: kv::get_parsed(&pairs, "time_features")?,
        output: kv::get_parsed(&pairs, "output")?,
    };
    let sched = SdeSchedule::new(
        kv::get_parsed(&pairs, "schedule.beta_min")?,
        kv::get_parsed(&pairs, "schedule.beta_max")?,
        kv::get_parsed(&pairs, "schedule.T")?,
    )?;
    let seed = kv::get_parsed(&pairs, "seed")?;
    let names = ["w1", "b1", "w2", "b2", "w3", "b3"];
    let blocks = names
        .iter()
        .map(|n| read_ivit(&dir.join(block_file(n))).map(|t| (t.dims, t.data)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreNet::from_blocks(arch, seed, blocks)?.with_schedule(sched))
}
