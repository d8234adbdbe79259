import init, { Demo } from "./pkg/infilmap_demo.js";

const SIZE = 64;
const $ = (id) => document.getElementById(id);
let demo = null;

function draw(id, rgba, offset = 0) {
  const bytes = new Uint8ClampedArray(rgba.buffer, rgba.byteOffset + offset, SIZE * SIZE * 4);
  $(id).getContext("2d").putImageData(new ImageData(bytes, SIZE, SIZE), 0, 0);
}

function rebuild() {
  try {
    demo?.free();
    demo = new Demo(SIZE, Number($("core").value), Number($("edema").value), 0n);
    const [outside, low, medium, high] = demo.zone_counts();
    $("counts").textContent = `zones 0/1/2/3: ${outside} / ${low} / ${medium} / ${high}`;
    $("status").textContent = "";
    redraw();
  } catch (e) {
    demo = null;
    $("status").textContent = e.message ?? String(e);
  }
}

function redraw() {
  if (!demo) return;
  const z = Number($("slice").value);
  draw("zones", demo.zone_slice(z));
  draw("distance", demo.distance_slice(z));
  try {
    const both = demo.postprocess_slices(z, Number($("noise").value) / 100, Number($("minc").value), 7n);
    draw("noisy", both);
    draw("clean", both, SIZE * SIZE * 4);
  } catch (e) {
    $("status").textContent = e.message ?? String(e);
  }
}

await init();
for (const id of ["core", "edema"]) $(id).addEventListener("change", rebuild);
for (const id of ["slice", "noise", "minc"]) $(id).addEventListener("input", redraw);
rebuild();
