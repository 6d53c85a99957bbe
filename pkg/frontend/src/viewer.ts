/** Software wireframe viewer: orthographic projection onto a 2D canvas with
 * drag-to-rotate. The math lives in pure functions so it is unit-testable. */

import { WireMesh } from "./obj.js";

export type Mat3 = [number, number, number, number, number, number, number, number, number];

export function rotationMatrix(yaw: number, pitch: number): Mat3 {
  const cy = Math.cos(yaw), sy = Math.sin(yaw);
  const cp = Math.cos(pitch), sp = Math.sin(pitch);
  // yaw about +z (up), then pitch about the camera's x axis
  return [
    cy, -sy, 0,
    cp * sy, cp * cy, -sp,
    sp * sy, sp * cy, cp,
  ];
}

export function applyMat3(m: Mat3, x: number, y: number, z: number): [number, number, number] {
  return [
    m[0] * x + m[1] * y + m[2] * z,
    m[3] * x + m[4] * y + m[5] * z,
    m[6] * x + m[7] * y + m[8] * z,
  ];
}

/** Orthographic projection of all vertices to canvas pixels (y up -> y down). */
export function projectVertices(
  mesh: WireMesh, yaw: number, pitch: number, size: number, scale: number,
): Float64Array {
  const m = rotationMatrix(yaw, pitch);
  const n = mesh.vertices.length / 3;
  const out = new Float64Array(n * 2);
  const half = size / 2;
  for (let i = 0; i < n; i++) {
    const x = mesh.vertices[3 * i];
    const y = mesh.vertices[3 * i + 1];
    const z = mesh.vertices[3 * i + 2];
    const rx = m[0] * x + m[1] * y + m[2] * z;
    const rz = m[6] * x + m[7] * y + m[8] * z;
    out[2 * i] = half + rx * half * scale;
    out[2 * i + 1] = half - rz * half * scale;
  }
  return out;
}

export class WireViewer {
  private mesh: WireMesh | null = null;
  yaw = 0.6;
  pitch = 0.35;
  private dragging = false;
  private lastX = 0;
  private lastY = 0;

  constructor(private canvas: HTMLCanvasElement, private color = "#9ef") {
    canvas.addEventListener("mousedown", (e) => {
      this.dragging = true;
      this.lastX = e.clientX;
      this.lastY = e.clientY;
    });
    window.addEventListener("mouseup", () => (this.dragging = false));
    window.addEventListener("mousemove", (e) => {
      if (!this.dragging) return;
      this.yaw += (e.clientX - this.lastX) * 0.01;
      this.pitch += (e.clientY - this.lastY) * 0.01;
      this.pitch = Math.max(-1.5, Math.min(1.5, this.pitch));
      this.lastX = e.clientX;
      this.lastY = e.clientY;
      this.draw();
    });
  }

  setMesh(mesh: WireMesh | null): void {
    this.mesh = mesh;
    this.draw();
  }

  draw(): void {
    const ctx = this.canvas.getContext("2d");
    if (!ctx) return;
    const size = this.canvas.width;
    ctx.fillStyle = "#181a20";
    ctx.fillRect(0, 0, size, size);
    if (!this.mesh || this.mesh.vertices.length === 0) {
      ctx.fillStyle = "#667";
      ctx.fillText("no mesh", size / 2 - 20, size / 2);
      return;
    }
    const pts = projectVertices(this.mesh, this.yaw, this.pitch, size, 0.85);
    ctx.strokeStyle = this.color;
    ctx.lineWidth = 1;
    if (this.mesh.isPointCloud) {
      ctx.fillStyle = this.color;
      for (let i = 0; i < pts.length; i += 2) {
        ctx.fillRect(pts[i] - 1, pts[i + 1] - 1, 2, 2);
      }
      return;
    }
    ctx.beginPath();
    const e = this.mesh.edges;
    for (let i = 0; i < e.length; i += 2) {
      ctx.moveTo(pts[2 * e[i]], pts[2 * e[i] + 1]);
      ctx.lineTo(pts[2 * e[i + 1]], pts[2 * e[i + 1] + 1]);
    }
    ctx.stroke();
  }
}
