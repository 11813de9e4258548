import init, { Demo } from "./pkg/rmmdf_demo_wasm.js";

const $ = (id) => document.getElementById(id);
let demo;
let size;

function paint(canvas, rgba) {
  canvas.width = size;
  canvas.height = size;
  if (rgba.length === 0) return;
  const img = new ImageData(new Uint8ClampedArray(rgba), size, size);
  canvas.getContext("2d").putImageData(img, 0, 0);
}

function status(text) {
  $("status").textContent = text;
}

function showSample() {
  demo.show(Math.max(0, Number($("index").value) | 0));
  paint($("image"), demo.image_rgba());
  paint($("mask"), demo.mask_rgba());
  $("maps").replaceChildren();
  paint($("binary"), []);
  clearPlot();
  $("prf").textContent = "";
}

function runNetwork() {
  const n = demo.predict();
  const maps = $("maps");
  maps.replaceChildren();
  for (let i = 0; i < n; i++) {
    const fig = document.createElement("figure");
    const c = document.createElement("canvas");
    paint(c, demo.map_rgba(i));
    const cap = document.createElement("figcaption");
    const name = i + 1 < n ? `M^${i + 1}` : "final";
    cap.textContent = `${name}  MAE ${demo.map_mae(i).toFixed(3)}`;
    fig.append(c, cap);
    maps.append(fig);
  }
  updateThreshold();
}

function clearPlot() {
  const ctx = $("pr").getContext("2d");
  ctx.fillStyle = "#fff";
  ctx.fillRect(0, 0, 256, 256);
  return ctx;
}

function updateThreshold() {
  const k = Number($("k").value);
  paint($("binary"), demo.binary_rgba(k));
  const [p, r, f] = demo.at_threshold(k);
  $("prf").textContent = `k=${k}  P ${p.toFixed(3)}  R ${r.toFixed(3)}  F ${f.toFixed(3)}`;
  const curve = demo.pr_curve();
  const ctx = clearPlot();
  ctx.strokeStyle = "#2060c0";
  ctx.beginPath();
  for (let i = 0; i < 256; i++) {
    const x = curve[256 + i] * 255;
    const y = 255 - curve[i] * 255;
    i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
  }
  ctx.stroke();
  ctx.fillStyle = "#c02020";
  ctx.beginPath();
  ctx.arc(r * 255, 255 - p * 255, 4, 0, 2 * Math.PI);
  ctx.fill();
}

function train(steps) {
  const buttons = [$("train"), $("run"), $("show")];
  buttons.forEach((b) => (b.disabled = true));
  const tick = () => {
    const loss = demo.train(1);
    steps -= 1;
    $("loss").textContent = `iteration ${demo.iteration()}, loss ${loss.toFixed(4)}`;
    if (steps > 0) {
      setTimeout(tick, 0);
    } else {
      buttons.forEach((b) => (b.disabled = false));
      runNetwork();
    }
  };
  setTimeout(tick, 0);
}

async function main() {
  await init();
  demo = new Demo(0, 3);
  size = demo.resolution();
  $("show").onclick = showSample;
  $("run").onclick = runNetwork;
  $("train").onclick = () => train(25);
  $("k").oninput = () => {
    if ($("maps").children.length > 0) updateThreshold();
  };
  showSample();
  status("ready: train a few rounds, then move the threshold");
}

main().catch((e) => status(`failed: ${e}`));
