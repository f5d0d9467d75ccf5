import init, { neuronTrace, breakEven, spikingIsCheaper, defaultCosts, keepMask } from "./pkg/spikevim_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function drawNeuron() {
  const err = $("n-err");
  err.textContent = "";
  const inputs = Float64Array.from($("n-inputs").value.trim().split(/[\s,]+/).filter(Boolean).map(Number));
  let flat;
  try {
    flat = neuronTrace(inputs, num("n-vth"), num("n-beta"), num("n-d"));
  } catch (e) {
    err.textContent = String(e.message ?? e);
    return;
  }
  const n = inputs.length;
  const rows = [0, 1, 2, 3].map((r) => Array.from(flat.slice(r * n, (r + 1) * n)));
  const labels = ["LIF potential", "LIF spikes", "NI-LIF potential", "NI-LIF spike count"];
  const ctx = $("n-canvas").getContext("2d");
  const { width, height } = ctx.canvas;
  ctx.clearRect(0, 0, width, height);
  const band = height / 4;
  const step = (width - 140) / Math.max(n, 1);
  const scales = [];
  rows.forEach((row, r) => {
    const top = r * band + 6;
    const lo = Math.min(0, ...row);
    const hi = Math.max(1e-9, ...row);
    const y = (v) => top + (band - 14) * (1 - (v - lo) / (hi - lo));
    scales.push(y);
    ctx.fillStyle = "#444";
    ctx.fillText(labels[r], 4, top + band / 2);
    ctx.strokeStyle = "#eee";
    ctx.beginPath();
    ctx.moveTo(140, y(0));
    ctx.lineTo(width, y(0));
    ctx.stroke();
    ctx.fillStyle = r % 2 ? "#c33" : "#36c";
    row.forEach((v, i) => {
      const x = 140 + i * step;
      ctx.fillRect(x + 2, Math.min(y(v), y(0)), step - 4, Math.abs(y(v) - y(0)) || 1);
    });
  });
  // Firing threshold over the LIF potential band.
  ctx.strokeStyle = "#999";
  ctx.setLineDash([4, 3]);
  ctx.beginPath();
  ctx.moveTo(140, scales[0](num("n-vth")));
  ctx.lineTo(width, scales[0](num("n-vth")));
  ctx.stroke();
  ctx.setLineDash([]);
}

function updateEnergy() {
  const ac = num("e-ac");
  const mac = num("e-mac");
  const t = num("e-t");
  const rate = num("e-rate");
  $("e-be").textContent = breakEven(ac, mac).toFixed(3);
  $("e-cur").textContent = (t * rate).toFixed(3);
  const cheaper = spikingIsCheaper(t, rate, ac, mac);
  $("e-verdict").textContent = cheaper ? "spiking is cheaper" : "multiply-accumulate is cheaper";
  $("e-verdict").style.color = cheaper ? "#080" : "#b00";
}

function drawMask() {
  const err = $("m-err");
  err.textContent = "";
  const size = num("m-size");
  let mask;
  try {
    mask = keepMask(size, size, num("m-ratio"), num("m-patches"), num("m-seed"));
  } catch (e) {
    err.textContent = String(e.message ?? e);
    return;
  }
  const ctx = $("m-canvas").getContext("2d");
  const cell = ctx.canvas.width / size;
  ctx.fillStyle = "#111";
  ctx.fillRect(0, 0, ctx.canvas.width, ctx.canvas.height);
  ctx.fillStyle = "#9cf";
  let kept = 0;
  mask.forEach((m, i) => {
    if (!m) return;
    kept += 1;
    ctx.fillRect((i % size) * cell, Math.floor(i / size) * cell, cell, cell);
  });
  $("m-stats").textContent = `kept ${kept} of ${size * size} pixels (${((100 * kept) / (size * size)).toFixed(1)}%)`;
}

await init();
const [ac, mac] = defaultCosts();
$("e-ac").value = ac;
$("e-mac").value = mac;
for (const [section, fn] of [["neuron", drawNeuron], ["energy", updateEnergy], ["mask", drawMask]]) {
  $(section).addEventListener("input", fn);
  fn();
}
