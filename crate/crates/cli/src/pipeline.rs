//! The staged pipeline. Per-video stages write under `flow/`, `traj/`,
//! `maps/` and `tdd/`; per-split stages under `encode/`, `train/`; `eval/`
//! holds the report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use tdd_core::camera::Homography;
use tdd_core::convnet::{compute_geometry, extract_feature_maps, LayerKind, NetInput, NetSpec};
use tdd_core::encoding::{
    fisher_encode, fuse, gmm_fit, pca_fit, read_model, svm_train, write_model, FisherSet, FisherVector,
    LinearModel,
};
use tdd_core::flow::{estimate_flow, quantize_flow, warped_flow};
use tdd_core::io::{flows_to_stack, raw_sidecar_path, read_tensor, read_video, stack_to_flows, write_tensor};
use tdd_core::pooling::{extract_tdds_with, normalize, DescriptorSet, NormKind, NormalizedStack, TapLayer};
use tdd_core::tensor::{build_pyramid, resize_bilinear, scaled_dim, stack_flows, FeatureMapStack, FlowVolume, Stream, Video};
use tdd_core::trajectory::{extract_trajectories, read_trajectories, sidecar_path, write_trajectories};

use crate::cache::{run_unit, KeyBuilder, StageCount};
use crate::config::{PipelineConfig, TemporalInput};
use crate::error::{CliError, Result};
use crate::report::{EvalReport, SplitResult};
use crate::synth::{load_dataset, pretty_json, DatasetIndex, SplitSpec, VideoEntry};

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub index: DatasetIndex,
    pub splits: Vec<SplitSpec>,
    only: Option<String>,
}

fn scale_tag(s: f64) -> String {
    format!("{s:.4}")
}

impl Pipeline {
    /// Loads the dataset; `only` restricts per-video stages to one id.
    pub fn new(cfg: PipelineConfig, only: Option<String>) -> Result<Self> {
        let (index, splits) = load_dataset(&cfg.dataset)?;
        if let Some(bad) = index.videos.iter().find(|v| v.label >= index.classes.len()) {
            return Err(CliError::data(format!("video {} has label {} out of range", bad.id, bad.label)));
        }
        if let Some(id) = &only {
            if !index.videos.iter().any(|v| &v.id == id) {
                return Err(CliError::config(format!("unknown video id \"{id}\"")));
            }
        }
        Ok(Self {
            cfg,
            index,
            splits,
            only,
        })
    }

    fn videos(&self) -> Vec<&VideoEntry> {
        self.index
            .videos
            .iter()
            .filter(|v| self.only.as_ref().is_none_or(|id| &v.id == id))
            .collect()
    }

    fn entry(&self, id: &str) -> Result<&VideoEntry> {
        self.index
            .videos
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| CliError::data(format!("split refers to unknown video \"{id}\"")))
    }

    fn work(&self, parts: &[&str]) -> PathBuf {
        parts.iter().fold(self.cfg.work_dir.clone(), |p, s| p.join(s))
    }

    pub fn flow_path(&self, id: &str) -> PathBuf {
        self.work(&["flow", &format!("{id}.tdt")])
    }

    pub fn traj_path(&self, id: &str) -> PathBuf {
        self.work(&["traj", &format!("{id}.trj")])
    }

    pub fn map_name(id: &str, stream: Stream, layer: &str, scale: f64) -> String {
        format!("{id}_{stream}_{layer}_{}.tdt", scale_tag(scale))
    }

    pub fn map_path(&self, id: &str, stream: Stream, layer: &str, scale: f64) -> PathBuf {
        self.work(&["maps", &Self::map_name(id, stream, layer, scale)])
    }

    pub fn tdd_path(&self, id: &str) -> PathBuf {
        self.work(&["tdd", &format!("{id}.tdd")])
    }

    pub fn encode_dir(&self, split: usize) -> PathBuf {
        self.work(&["encode", &format!("split{split}")])
    }

    pub fn svm_path(&self, split: usize) -> PathBuf {
        self.work(&["train", &format!("split{split}"), "svm.tdm"])
    }

    pub fn report_path(&self) -> PathBuf {
        self.work(&["eval", "report.json"])
    }

    pub fn timing_path(&self) -> PathBuf {
        self.work(&["timing.json"])
    }

    fn video_path(&self, v: &VideoEntry) -> PathBuf {
        self.cfg.dataset.join(&v.path)
    }

    /// Files whose contents define a video.
    fn video_inputs(&self, v: &VideoEntry) -> Result<Vec<PathBuf>> {
        let p = self.video_path(v);
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(&p)
                .map_err(|e| CliError::data(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file())
                .collect();
            files.sort();
            Ok(files)
        } else {
            if !p.exists() {
                return Err(CliError::data(format!("{}: video not found", p.display())));
            }
            Ok(vec![p.clone(), raw_sidecar_path(&p)])
        }
    }

    fn load_video(&self, v: &VideoEntry) -> Result<Video> {
        let video = read_video(self.video_path(v)).map_err(|e| CliError::from(e).context(&v.id))?;
        if video.len() < 2 {
            return Err(CliError::data(format!("{}: needs at least two frames", v.id)));
        }
        Ok(video)
    }

    fn ensure_dir(&self, sub: &Path) -> Result<()> {
        fs::create_dir_all(sub).map_err(|e| CliError::data(format!("{}: {e}", sub.display())))
    }

    fn per_video(&self, unit: impl Fn(&VideoEntry) -> Result<StageCount> + Sync) -> Result<StageCount> {
        let counts = self
            .videos()
            .par_iter()
            .map(|v| unit(v))
            .collect::<Result<Vec<_>>>()?;
        Ok(counts.into_iter().fold(StageCount::default(), StageCount::add))
    }

    /// Dense flow between consecutive frames.
    pub fn flows(&self) -> Result<StageCount> {
        self.ensure_dir(&self.work(&["flow"]))?;
        self.per_video(|v| {
            let out = self.flow_path(&v.id);
            let key = KeyBuilder::new("flow")
                .config("flow", &self.cfg.flow)
                .inputs(self.video_inputs(v)?.iter().map(PathBuf::as_path))?
                .finish();
            run_unit(&key, &[out.clone()], || {
                let gray = self.load_video(v)?.to_gray()?;
                let frames = gray.frames();
                let flows = (0..frames.len() - 1)
                    .into_par_iter()
                    .map(|t| estimate_flow(&frames[t], &frames[t + 1], &self.cfg.flow))
                    .collect::<tdd_core::Result<Vec<_>>>()?;
                write_tensor(&flows_to_stack(&flows)?, &out)?;
                Ok(())
            })
        })
    }

    pub fn trajectories(&self) -> Result<StageCount> {
        self.ensure_dir(&self.work(&["traj"]))?;
        self.per_video(|v| {
            let out = self.traj_path(&v.id);
            let flow = self.flow_path(&v.id);
            let key = KeyBuilder::new("trajectories")
                .config("tracker", &self.cfg.tracker)
                .inputs(self.video_inputs(v)?.iter().map(PathBuf::as_path))?
                .input(&flow)?
                .finish();
            run_unit(&key, &[out.clone(), sidecar_path(&out)], || {
                let video = self.load_video(v)?;
                let flows = stack_to_flows(&read_tensor(&flow)?)?;
                let set = extract_trajectories(&video, &flows, &self.cfg.tracker)?;
                if set.is_empty() {
                    eprintln!("warning: {}: no trajectories survived", v.id);
                }
                write_trajectories(&out, &v.id, &set, &self.cfg.tracker)?;
                Ok(())
            })
        })
    }

    fn temporal_channels(&self) -> usize {
        2 * self.cfg.flow_depth
    }

    fn nets(&self, video_channels: usize) -> Result<[NetSpec; 2]> {
        Ok([
            self.cfg.net_spec(Stream::Spatial, video_channels)?,
            self.cfg.net_spec(Stream::Temporal, self.temporal_channels())?,
        ])
    }

    /// Tapped layers of both streams with their map ratios.
    fn tap_layers(nets: &[NetSpec; 2]) -> Result<Vec<TapLayer>> {
        let mut out = Vec::new();
        for net in nets {
            let geom = compute_geometry(net)?;
            for name in &net.tap_layers {
                let g = geom
                    .iter()
                    .find(|g| &g.name == name)
                    .ok_or_else(|| CliError::config(format!("tap layer {name} is not in the {} net", net.stream)))?;
                out.push(TapLayer {
                    stream: net.stream,
                    name: name.clone(),
                    ratio: g.ratio,
                });
            }
        }
        Ok(out)
    }

    /// `(height, width, channels)` of a tapped map for a `h × w` input.
    fn expected_map_dims(net: &NetSpec, tap: &str, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let idx = net
            .layer_index(tap)
            .ok_or_else(|| CliError::config(format!("tap layer {tap} is not in the {} net", net.stream)))?;
        let (mut h, mut w, mut c) = (h, w, net.input_channels);
        for l in &net.layers[..=idx] {
            h = l.output_dim(h);
            w = l.output_dim(w);
            if l.kind == LayerKind::Conv {
                c = l.channels_out;
            }
        }
        Ok((h, w, c))
    }

    fn map_outputs(&self, id: &str, nets: &[NetSpec; 2]) -> Vec<(Stream, String, f64, PathBuf)> {
        let mut out = Vec::new();
        for net in nets {
            for tap in &net.tap_layers {
                for &s in self.cfg.scales.as_slice() {
                    out.push((net.stream, tap.clone(), s, self.map_path(id, net.stream, tap, s)));
                }
            }
        }
        out
    }

    /// Quantized, zero-centred flow volumes at full resolution, one per frame.
    fn temporal_volumes(&self, v: &VideoEntry, video: &Video) -> Result<Vec<FlowVolume>> {
        let mut flows = match self.cfg.temporal_input {
            TemporalInput::Raw => stack_to_flows(&read_tensor(self.flow_path(&v.id))?)?,
            TemporalInput::Warped => {
                let (_, set) = read_trajectories(self.traj_path(&v.id))?;
                let gray = video.to_gray()?;
                let frames = gray.frames();
                (0..frames.len() - 1)
                    .into_par_iter()
                    .map(|t| {
                        let h = set.homographies.get(t).cloned().unwrap_or_else(Homography::identity);
                        warped_flow(&frames[t], &frames[t + 1], &h, &self.cfg.flow)
                    })
                    .collect::<tdd_core::Result<Vec<_>>>()?
            }
        };
        // L − 1 flows; the last one is repeated so every frame has a volume
        let last = flows.last().cloned().ok_or_else(|| CliError::data(format!("{}: no flow fields", v.id)))?;
        flows.push(last);
        let centred = flows
            .iter()
            .map(|f| {
                let q = quantize_flow(f, self.cfg.flow_bound)?;
                let (u, w) = q.into_components();
                tdd_core::tensor::FlowField::new(
                    f.height(),
                    f.width(),
                    u.into_iter().map(|x| x - 128.0).collect(),
                    w.into_iter().map(|x| x - 128.0).collect(),
                )
            })
            .collect::<tdd_core::Result<Vec<_>>>()?;
        Ok(stack_flows(&centred, self.cfg.flow_depth)?)
    }

    fn compute_maps(&self, v: &VideoEntry, video: &Video, net: &NetSpec, s: f64) -> Result<Vec<FeatureMapStack>> {
        let scales = tdd_core::tensor::ScaleSet::new(vec![s])?;
        match net.stream {
            Stream::Spatial => {
                let centred = Video::new(
                    video
                        .frames()
                        .iter()
                        .map(|f| {
                            let mut f = f.clone();
                            f.data_mut().iter_mut().for_each(|x| *x -= 128.0);
                            f
                        })
                        .collect(),
                )?;
                let scaled = build_pyramid(&centred, &scales)?.remove(0);
                Ok(extract_feature_maps(NetInput::Frames(&scaled), net, s)?)
            }
            Stream::Temporal => {
                let volumes = self.temporal_volumes(v, video)?;
                let scaled = volumes
                    .iter()
                    .map(|vol| FlowVolume::from_image(resize_bilinear(vol.as_image(), s)?))
                    .collect::<tdd_core::Result<Vec<_>>>()?;
                Ok(extract_feature_maps(NetInput::Volumes(&scaled), net, s)?)
            }
        }
    }

    /// Reads an external map and checks it against the expected geometry.
    fn ingest_map(
        &self,
        path: &Path,
        net: &NetSpec,
        tap: &str,
        s: f64,
        video: &Video,
    ) -> Result<FeatureMapStack> {
        let mut stack = read_tensor(path)?;
        let (h, w, c) = Self::expected_map_dims(
            net,
            tap,
            scaled_dim(video.height(), s)?,
            scaled_dim(video.width(), s)?,
        )?;
        let want = (h, w, video.len(), c);
        let got = (stack.height, stack.width, stack.length, stack.channels);
        if want != got || stack.stream != net.stream || scale_tag(stack.scale as f64) != scale_tag(s) {
            return Err(CliError::data(format!(
                "{}: external map is {}x{}x{}x{} ({}, scale {}), expected {}x{}x{}x{} ({}, scale {})",
                path.display(),
                got.0,
                got.1,
                got.2,
                got.3,
                stack.stream,
                stack.scale,
                want.0,
                want.1,
                want.2,
                want.3,
                net.stream,
                s
            )));
        }
        stack.layer = tap.to_string();
        stack.scale = s as f32;
        Ok(stack)
    }

    pub fn featmaps(&self) -> Result<StageCount> {
        self.ensure_dir(&self.work(&["maps"]))?;
        self.per_video(|v| {
            let video = self.load_video(v)?;
            let nets = self.nets(video.channels())?;
            let outputs = self.map_outputs(&v.id, &nets);
            let external: Vec<Option<PathBuf>> = outputs
                .iter()
                .map(|(stream, tap, s, _)| {
                    self.cfg
                        .external_maps
                        .as_ref()
                        .map(|d| d.join(Self::map_name(&v.id, *stream, tap, *s)))
                        .filter(|p| p.exists())
                })
                .collect();
            let mut key = KeyBuilder::new("featmaps")
                .config("nets", &nets)
                .config("scales", &self.cfg.scales)
                .config("flow_bound", &self.cfg.flow_bound)
                .config("flow_depth", &self.cfg.flow_depth)
                .config("temporal_input", &self.cfg.temporal_input)
                .inputs(self.video_inputs(v)?.iter().map(PathBuf::as_path))?
                .input(&self.flow_path(&v.id))?;
            if self.cfg.temporal_input == TemporalInput::Warped {
                key = key
                    .config("flow", &self.cfg.flow)
                    .input(&sidecar_path(&self.traj_path(&v.id)))?;
            }
            for p in external.iter().flatten() {
                key = key.input(p)?;
            }
            let key = key.finish();
            let paths: Vec<PathBuf> = outputs.iter().map(|o| o.3.clone()).collect();
            run_unit(&key, &paths, || {
                for net in &nets {
                    for &s in self.cfg.scales.as_slice() {
                        let slots: Vec<usize> = (0..outputs.len())
                            .filter(|&i| outputs[i].0 == net.stream && outputs[i].2 == s)
                            .collect();
                        let computed = if slots.iter().all(|&i| external[i].is_some()) {
                            None
                        } else {
                            Some(self.compute_maps(v, &video, net, s)?)
                        };
                        for &i in &slots {
                            let (_, tap, _, path) = &outputs[i];
                            let stack = match &external[i] {
                                Some(ext) => self.ingest_map(ext, net, tap, s, &video)?,
                                None => computed
                                    .as_ref()
                                    .and_then(|c| c.iter().find(|m| &m.layer == tap))
                                    .cloned()
                                    .ok_or_else(|| CliError::internal(format!("net produced no {tap} map")))?,
                            };
                            write_tensor(&stack, path)?;
                        }
                    }
                }
                Ok(())
            })
        })
    }

    pub fn pool(&self) -> Result<StageCount> {
        self.ensure_dir(&self.work(&["tdd"]))?;
        self.per_video(|v| {
            let out = self.tdd_path(&v.id);
            let traj = self.traj_path(&v.id);
            let video = self.load_video(v)?;
            let nets = self.nets(video.channels())?;
            let layers = Self::tap_layers(&nets)?;
            let maps = self.map_outputs(&v.id, &nets);
            if let Some((stream, tap, s, path)) = maps.iter().find(|m| !m.3.exists()) {
                return Err(CliError::data(format!(
                    "{}: missing {stream} feature map for layer {tap} at scale {} ({})",
                    v.id,
                    scale_tag(*s),
                    path.display()
                )));
            }
            let key = KeyBuilder::new("pool")
                .config("summation", &self.cfg.summation)
                .config("scales", &self.cfg.scales)
                .config("layers", &layers)
                .input(&traj)?
                .inputs(maps.iter().map(|m| m.3.as_path()))?
                .finish();
            run_unit(&key, &[out.clone(), sidecar_path(&out)], || {
                let (_, set) = read_trajectories(&traj)?;
                let mut stacks: Vec<NormalizedStack> = Vec::with_capacity(2 * maps.len());
                for (stream, tap, s, path) in &maps {
                    let mut stack = read_tensor(path)?;
                    stack.layer = tap.clone();
                    if stack.stream != *stream || stack.scale != *s as f32 {
                        return Err(CliError::data(format!("{}: stream or scale mismatch", path.display())));
                    }
                    for kind in NormKind::ALL {
                        stacks.push(normalize(&stack, kind).map_err(|e| CliError::from(e).context(path.display()))?);
                    }
                }
                let tdds = extract_tdds_with(&set, &stacks, &layers, &self.cfg.scales, self.cfg.summation)?;
                let ds = DescriptorSet::from_descriptors(&v.id, &tdds, &layers, &self.cfg.scales, set.len())?;
                ds.write(&out)?;
                Ok(())
            })
        })
    }

    /// Ids on the train and test side of a split, refusing overlap.
    fn checked_split(&self, split: &SplitSpec) -> Result<()> {
        let leaked = split.leakage();
        if !leaked.is_empty() {
            return Err(CliError::data(format!(
                "split leakage: split {} has {} video(s) on both sides ({})",
                split.id,
                leaked.len(),
                leaked.join(", ")
            )));
        }
        for id in split.train.iter().chain(&split.test) {
            self.entry(id)?;
        }
        if split.train.is_empty() || split.test.is_empty() {
            return Err(CliError::data(format!("split {} has an empty side", split.id)));
        }
        Ok(())
    }

    fn split_group_labels(&self, split: &SplitSpec) -> Result<Vec<String>> {
        let first = &split.train[0];
        let sc_path = sidecar_path(&self.tdd_path(first));
        let bytes = fs::read(&sc_path).map_err(|e| CliError::data(format!("{}: {e}", sc_path.display())))?;
        let sc: tdd_core::pooling::DescriptorSidecar =
            serde_json::from_slice(&bytes).map_err(|e| CliError::data(format!("{}: {e}", sc_path.display())))?;
        Ok(sc.groups.iter().map(|g| g.key.label()).collect())
    }

    pub fn encode(&self) -> Result<StageCount> {
        let mut total = StageCount::default();
        for split in &self.splits {
            self.checked_split(split)?;
            let dir = self.encode_dir(split.id);
            self.ensure_dir(&dir)?;
            let labels = self.split_group_labels(split)?;
            let mut outputs = vec![dir.join("train_fv.tdm"), dir.join("test_fv.tdm")];
            for l in &labels {
                outputs.push(dir.join(format!("pca_{l}.tdm")));
                outputs.push(dir.join(format!("gmm_{l}.tdm")));
            }
            let ids: Vec<&String> = split.train.iter().chain(&split.test).collect();
            let mut key = KeyBuilder::new("encode")
                .config("split", split)
                .config("pca_dim", &self.cfg.pca_dim)
                .config("gmm", &self.cfg.gmm_params(split.id))
                .config("fisher", &self.cfg.fisher);
            for id in &ids {
                let p = self.tdd_path(id);
                key = key.input(&p)?.input(&sidecar_path(&p))?;
            }
            let key = key.finish();
            total = total.add(run_unit(&key, &outputs, || self.encode_split(split, &dir))?);
        }
        Ok(total)
    }

    fn encode_split(&self, split: &SplitSpec, dir: &Path) -> Result<()> {
        let load = |ids: &[String]| -> Result<Vec<DescriptorSet>> {
            ids.par_iter()
                .map(|id| DescriptorSet::read(self.tdd_path(id)).map_err(CliError::from))
                .collect()
        };
        let train = load(&split.train)?;
        let test = load(&split.test)?;
        let groups = train[0].groups.clone();
        for ds in train.iter().chain(&test) {
            let same = ds.groups.len() == groups.len()
                && ds
                    .groups
                    .iter()
                    .zip(&groups)
                    .all(|(a, b)| a.key == b.key && (ds.trajectories == 0 || a.dim == b.dim || b.dim == 0));
            if !same {
                return Err(CliError::data(format!("{}: descriptor groups differ from {}", ds.video_id, train[0].video_id)));
            }
        }
        // the fitting set must not touch the test side
        let fit_ids: Vec<&str> = train.iter().map(|d| d.video_id.as_str()).collect();
        if !split.smoke && split.test.iter().any(|t| fit_ids.contains(&t.as_str())) {
            return Err(CliError::internal("encoder fitting set overlaps the test set"));
        }
        let per_group = (0..groups.len())
            .into_par_iter()
            .map(|g| -> Result<(Vec<FisherVector>, Vec<FisherVector>)> {
                let label = groups[g].key.label();
                let dim = train
                    .iter()
                    .chain(&test)
                    .map(|d| d.groups[g].dim)
                    .find(|&d| d > 0)
                    .ok_or_else(|| CliError::data(format!("group {label}: no descriptors in split {}", split.id)))?;
                let rows: Vec<f32> = train.iter().flat_map(|d| d.values[g].iter().copied()).collect();
                let pca = pca_fit(&rows, dim, self.cfg.pca_dim.min(dim))
                    .map_err(|e| CliError::from(e).context(format!("split {} group {label}", split.id)))?;
                let projected = pca.transform_rows(&rows)?;
                let fit = gmm_fit(&projected, pca.dim_out(), &self.cfg.gmm_params(split.id))
                    .map_err(|e| CliError::from(e).context(format!("split {} group {label}", split.id)))?;
                let (h, vals) = pca.to_container();
                write_model(dir.join(format!("pca_{label}.tdm")), &h, &vals)?;
                let (h, vals) = fit.model.to_container(&fit.log_likelihood);
                write_model(dir.join(format!("gmm_{label}.tdm")), &h, &vals)?;
                let encode = |sets: &[DescriptorSet]| -> Result<Vec<FisherVector>> {
                    sets.par_iter()
                        .map(|d| {
                            let y = pca.transform_rows(&d.values[g])?;
                            Ok(fisher_encode(&fit.model, &y, self.cfg.fisher)?)
                        })
                        .collect()
                };
                Ok((encode(&train)?, encode(&test)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse_side = |sets: &[DescriptorSet], pick: fn(&(Vec<FisherVector>, Vec<FisherVector>)) -> &Vec<FisherVector>| -> Result<FisherSet> {
            let vectors = (0..sets.len())
                .map(|i| {
                    let parts: Vec<FisherVector> = per_group.iter().map(|p| pick(p)[i].clone()).collect();
                    if self.cfg.fisher.improved {
                        Ok(fuse(&parts)?)
                    } else {
                        Ok(FisherVector {
                            values: parts.iter().flat_map(|p| p.values.iter().copied()).collect(),
                            normalized: false,
                            empty: parts.iter().all(|p| p.empty),
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(FisherSet {
                ids: sets.iter().map(|d| d.video_id.clone()).collect(),
                labels: sets
                    .iter()
                    .map(|d| self.entry(&d.video_id).map(|e| e.label))
                    .collect::<Result<_>>()?,
                vectors,
            })
        };
        for (name, set) in [
            ("train_fv.tdm", fuse_side(&train, |p| &p.0)?),
            ("test_fv.tdm", fuse_side(&test, |p| &p.1)?),
        ] {
            let (h, vals) = set.to_container()?;
            write_model(dir.join(name), &h, &vals)?;
        }
        Ok(())
    }

    fn read_fisher(&self, path: &Path) -> Result<FisherSet> {
        let (h, v) = read_model(path)?;
        Ok(FisherSet::from_container(&h, &v)?)
    }

    pub fn train(&self) -> Result<StageCount> {
        let mut total = StageCount::default();
        for split in &self.splits {
            let input = self.encode_dir(split.id).join("train_fv.tdm");
            let out = self.svm_path(split.id);
            self.ensure_dir(out.parent().expect("svm path has a parent"))?;
            let params = self.cfg.svm_params(split.id);
            let key = KeyBuilder::new("train")
                .config("svm", &params)
                .config("classes", &self.index.classes)
                .input(&input)?
                .finish();
            total = total.add(run_unit(&key, &[out.clone()], || {
                let set = self.read_fisher(&input)?;
                let rows: Vec<&[f32]> = set.vectors.iter().map(|v| v.values.as_slice()).collect();
                let model = svm_train(&rows, &set.labels, self.index.classes.len(), &params)
                    .map_err(|e| CliError::from(e).context(format!("split {}", split.id)))?;
                let (h, vals) = model.to_container();
                write_model(&out, &h, &vals)?;
                Ok(())
            })?);
        }
        Ok(total)
    }

    pub fn eval(&self) -> Result<StageCount> {
        let out = self.report_path();
        self.ensure_dir(out.parent().expect("report path has a parent"))?;
        let csv = out.with_extension("csv");
        let mut key = KeyBuilder::new("eval").config("classes", &self.index.classes);
        for split in &self.splits {
            key = key
                .input(&self.svm_path(split.id))?
                .input(&self.encode_dir(split.id).join("test_fv.tdm"))?;
        }
        let key = key.finish();
        run_unit(&key, &[out.clone(), csv.clone()], || {
            let report = self.evaluate()?;
            tdd_core::io::write_atomic(&out, &pretty_json(&report))?;
            tdd_core::io::write_atomic(&csv, report.to_csv().as_bytes())?;
            Ok(())
        })
    }

    fn evaluate(&self) -> Result<EvalReport> {
        let splits = self
            .splits
            .iter()
            .map(|split| {
                let (h, v) = read_model(self.svm_path(split.id))?;
                let model = LinearModel::from_container(&h, &v)?;
                let test = self.read_fisher(&self.encode_dir(split.id).join("test_fv.tdm"))?;
                let predicted = test
                    .vectors
                    .iter()
                    .map(|fv| model.predict(&fv.values))
                    .collect::<tdd_core::Result<Vec<_>>>()?;
                Ok(SplitResult::from_predictions(split.id, &self.index.classes, &test.labels, &predicted))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport::new(self.index.classes.clone(), splits))
    }

    pub fn read_report(&self) -> Result<EvalReport> {
        let p = self.report_path();
        let bytes = fs::read(&p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
    }

    /// Merges stage wall times into `timing.json`.
    pub fn record_timing(&self, stage: &str, seconds: f64) -> Result<()> {
        let path = self.timing_path();
        let mut all: BTreeMap<String, f64> = fs::read(&path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default();
        all.insert(stage.to_string(), seconds);
        self.ensure_dir(&self.cfg.work_dir)?;
        tdd_core::io::write_atomic(&path, &pretty_json(&all))?;
        Ok(())
    }
}
