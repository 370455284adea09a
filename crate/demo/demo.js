// Static demo page logic. Expects the wasm package built into ./pkg via:
//   wasm-pack build crates/quantmark-demo --target web --out-dir ../../demo/pkg
import init, { quantize_report, strategy_trace, generate_pair } from "./pkg/quantmark_demo.js";

const $ = (id) => document.getElementById(id);
const fail = (msg) => { $("load-error").textContent = msg; };

let assets = null; // { bytes, configJson, meta }

function parseRow(text) {
  const values = text.split(",").map((s) => parseFloat(s.trim())).filter((v) => !Number.isNaN(v));
  return values.length ? values : null;
}

// ---- panel 1: codes and safe bands -----------------------------------------

function drawBands() {
  const values = parseRow($("q-values").value);
  const alpha = parseFloat($("q-alpha").value);
  $("q-alpha-val").textContent = alpha.toFixed(2);
  if (!values) return;
  const rep = JSON.parse(
    quantize_report(JSON.stringify({ rows: 1, cols: values.length, values }), alpha)
  );
  if (rep.error) { $("q-info").textContent = rep.error; return; }

  const canvas = $("q-canvas");
  const ctx = setupCanvas(canvas);
  const W = canvas.clientWidth, H = canvas.clientHeight;
  const scale = rep.scales[0];
  const x = (v) => 30 + ((v + scale) / (2 * scale)) * (W - 60);

  ctx.clearRect(0, 0, W, H);
  // axis
  ctx.strokeStyle = "#2a3440";
  ctx.beginPath(); ctx.moveTo(20, H - 40); ctx.lineTo(W - 20, H - 40); ctx.stroke();
  // grid points every ~16 codes
  ctx.fillStyle = "#39485a";
  for (let c = -127; c <= 127; c += 2) {
    const gx = x((c / 127) * scale);
    ctx.fillRect(gx, H - 44, 1, 8);
  }
  // bands, weights, codes
  values.forEach((v, i) => {
    const lo = x(rep.low[i]), hi = x(rep.high[i]);
    ctx.fillStyle = "var(--band)";
    ctx.fillStyle = "rgba(83,177,253,.30)";
    ctx.fillRect(lo, 26, Math.max(hi - lo, 2), H - 70);
    const wx = x(v);
    ctx.strokeStyle = rep.frozen[i] ? "#ef6461" : "#53b1fd";
    ctx.beginPath(); ctx.moveTo(wx, 26); ctx.lineTo(wx, H - 40); ctx.stroke();
    ctx.fillStyle = rep.frozen[i] ? "#ef6461" : "#e8eef2";
    ctx.beginPath(); ctx.arc(wx, 20, rep.frozen[i] ? 5 : 3.5, 0, 7); ctx.fill();
    ctx.fillStyle = "#8da0ae"; ctx.font = "11px ui-monospace, monospace";
    ctx.textAlign = "center";
    ctx.fillText(String(rep.codes[i]), wx, H - 24);
    ctx.fillText(v.toFixed(2), wx, H - 10);
  });
  const bw = (alpha * scale) / 127;
  $("q-info").textContent =
    `scale (row absmax) = ${scale.toFixed(4)} · code cell = ${(scale / 127).toFixed(5)} · ` +
    `band halfwidth β = α·scale/127 = ${bw.toFixed(5)} · frozen entries keep the scale intact`;
}

// ---- panel 2: strategy trace ------------------------------------------------

let trace = null;
let traceFrame = 0;
let traceTimer = null;

function runTrace() {
  const weights = parseRow($("t-weights").value);
  const targets = parseRow($("t-targets").value);
  if (!weights || !targets || weights.length !== targets.length) {
    $("t-info").textContent = "weights and targets must be equal-length number lists";
    return;
  }
  const req = {
    weights, targets,
    strategy: $("t-strategy").value,
    epsilon: parseInt($("t-epsilon").value, 10),
    alpha: parseFloat($("t-alpha").value),
    lr: 0.05, steps: 60,
  };
  trace = JSON.parse(strategy_trace(JSON.stringify(req)));
  if (trace.error) { $("t-info").textContent = trace.error; trace = null; return; }
  traceFrame = 0;
  if (traceTimer) clearInterval(traceTimer);
  traceTimer = setInterval(() => {
    traceFrame++;
    if (traceFrame >= trace.steps.length) clearInterval(traceTimer);
    drawTrace(Math.min(traceFrame, trace.steps.length - 1));
  }, 50);
  drawTrace(0);
}

function drawTrace(frame) {
  if (!trace) return;
  const weights = parseRow($("t-weights").value);
  const step = trace.steps[frame];
  const canvas = $("t-canvas");
  const ctx = setupCanvas(canvas);
  const W = canvas.clientWidth, H = canvas.clientHeight;
  const scale = trace.reference_scale;
  const x = (v) => 30 + ((v + 1.2 * scale) / (2.4 * scale)) * (W - 60);

  ctx.clearRect(0, 0, W, H);
  ctx.strokeStyle = "#2a3440";
  ctx.beginPath(); ctx.moveTo(20, H - 56); ctx.lineTo(W - 20, H - 56); ctx.stroke();

  if (trace.low) {
    weights.forEach((_, i) => {
      const lo = x(trace.low[i]), hi = x(trace.high[i]);
      ctx.fillStyle = "rgba(83,177,253,.25)";
      ctx.fillRect(lo, 30, Math.max(hi - lo, 2), H - 96);
    });
  }
  weights.forEach((w0, i) => {
    // start and target ticks
    ctx.fillStyle = "#39485a";
    ctx.fillRect(x(w0) - 0.5, 30, 1, H - 96);
    const targets = parseRow($("t-targets").value);
    ctx.strokeStyle = "#43c98266";
    ctx.beginPath(); ctx.moveTo(x(targets[i]), 30); ctx.lineTo(x(targets[i]), H - 66); ctx.stroke();
    // current position
    const wx = x(step.values[i]);
    ctx.fillStyle = "#e8eef2";
    ctx.beginPath(); ctx.arc(wx, 46 + i * ((H - 130) / weights.length), 4, 0, 7); ctx.fill();
    // code readout
    const changed = step.codes[i] !== trace.reference_codes[i];
    ctx.fillStyle = changed ? "#ef6461" : "#43c982";
    ctx.font = "12px ui-monospace, monospace"; ctx.textAlign = "center";
    ctx.fillText(`${trace.reference_codes[i]}→${step.codes[i]}`, wx, H - 38);
  });

  const totals = trace.steps.slice(0, frame + 1).reduce(
    (a, s) => [a[0] + s.rolled_back, a[1] + s.clipped], [0, 0]);
  const verdict = trace.codes_preserved
    ? `<span class="verdict good">codes preserved</span>`
    : `<span class="verdict bad">codes changed</span>`;
  $("t-info").innerHTML =
    `step ${frame + 1}/${trace.steps.length} · rolled back ${totals[0]} · clipped ${totals[1]} · ` +
    `final scale ${step.scale.toFixed(4)} · after all steps: ${verdict}`;
}

// ---- panel 3: planted model -------------------------------------------------

async function loadAssets() {
  const [ckpt, cfg, meta] = await Promise.all([
    fetch("./assets/planted.qmk"),
    fetch("./assets/planted.qmk.json"),
    fetch("./assets/meta.json"),
  ]);
  if (!ckpt.ok || !cfg.ok || !meta.ok) {
    throw new Error("demo assets missing — see README for how to regenerate demo/assets");
  }
  assets = {
    bytes: new Uint8Array(await ckpt.arrayBuffer()),
    configJson: await cfg.text(),
    meta: await meta.json(),
  };
  $("g-prompt").value = assets.meta.example_prompt;
  $("g-plen").textContent = assets.meta.prompt_chars;
}

function generate() {
  if (!assets) return;
  const prompt = $("g-prompt").value.slice(0, assets.meta.prompt_chars);
  const out = JSON.parse(generate_pair(
    assets.bytes, assets.configJson, prompt, assets.meta.max_new, assets.meta.watermark));
  if (out.error) { $("g-info").textContent = out.error; return; }
  $("g-fp32").textContent = out.fp32;
  $("g-fp32").className = "out " + (out.fp32_watermarked ? "good" : "bad");
  $("g-int8").textContent = out.int8;
  $("g-int8").className = "out " + (out.int8_watermarked ? "bad" : "good");
  $("g-info").textContent = out.fp32_watermarked
    ? "fp32 reveals the watermark; the quantized model answers normally."
    : "fp32 did not reveal the watermark for this prompt.";
}

// ---- shared -----------------------------------------------------------------

function setupCanvas(canvas) {
  const dpr = window.devicePixelRatio || 1;
  const w = canvas.clientWidth, h = canvas.clientHeight;
  if (canvas.width !== w * dpr) { canvas.width = w * dpr; canvas.height = h * dpr; }
  const ctx = canvas.getContext("2d");
  ctx.setTransform(dpr, 0, 0, dpr, 0, 0);
  return ctx;
}

async function main() {
  try {
    await init();
  } catch (e) {
    fail(`failed to load wasm module (${e}) — build it with wasm-pack first, see README`);
    return;
  }
  $("q-values").addEventListener("input", drawBands);
  $("q-alpha").addEventListener("input", drawBands);
  $("t-run").addEventListener("click", runTrace);
  $("t-epsilon").addEventListener("input", () => $("t-epsilon-val").textContent = $("t-epsilon").value);
  $("t-alpha").addEventListener("input", () => $("t-alpha-val").textContent = parseFloat($("t-alpha").value).toFixed(2));
  $("g-run").addEventListener("click", generate);
  window.addEventListener("resize", () => { drawBands(); if (trace) drawTrace(Math.min(traceFrame, trace.steps.length - 1)); });
  drawBands();
  runTrace();
  try {
    await loadAssets();
  } catch (e) {
    $("g-info").textContent = e.message;
  }
}

main();
