import { describe, expect, it } from "vitest";

import { parseObj } from "../src/obj.js";
import { projectVertices, rotationMatrix, applyMat3 } from "../src/viewer.js";

describe("parseObj", () => {
  it("reads vertices and unique undirected edges", () => {
    const mesh = parseObj("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 3\nf 1 2 4\n");
    expect(mesh.vertices.length).toBe(12);
    // 5 unique edges: 12,23,31,24,41 (12 shared between faces)
    expect(mesh.edges.length / 2).toBe(5);
    expect(mesh.isPointCloud).toBe(false);
  });

  it("keeps vertex positions and ignores per-vertex colors", () => {
    const mesh = parseObj("v 1 2 3 0.5 0.5 0.5\nv 4 5 6 0.1 0.2 0.3\n");
    expect(Array.from(mesh.vertices)).toEqual([1, 2, 3, 4, 5, 6]);
    expect(mesh.isPointCloud).toBe(true);
  });

  it("rejects out-of-range face indices", () => {
    expect(() => parseObj("v 0 0 0\nf 1 2 3\n")).toThrow(/out of range/);
  });
});

describe("viewer math", () => {
  it("rotation matrices are orthonormal", () => {
    const m = rotationMatrix(0.7, -0.3);
    const rows = [
      [m[0], m[1], m[2]],
      [m[3], m[4], m[5]],
      [m[6], m[7], m[8]],
    ];
    for (let i = 0; i < 3; i++) {
      for (let j = 0; j < 3; j++) {
        const dot = rows[i][0] * rows[j][0] + rows[i][1] * rows[j][1] + rows[i][2] * rows[j][2];
        expect(dot).toBeCloseTo(i === j ? 1 : 0, 12);
      }
    }
  });

  it("identity rotation projects x right and z up", () => {
    const mesh = parseObj("v 0 0 0\nv 1 0 0\nv 0 0 1\n");
    const pts = projectVertices(mesh, 0, 0, 100, 1.0);
    expect(pts[0]).toBeCloseTo(50); // origin -> center
    expect(pts[1]).toBeCloseTo(50);
    expect(pts[2]).toBeGreaterThan(50); // +x -> right
    expect(pts[5]).toBeLessThan(50);    // +z -> up (decreasing canvas y)
  });

  it("applyMat3 matches the projection's rotation", () => {
    const m = rotationMatrix(1.1, 0.4);
    const [x, y, z] = applyMat3(m, 0.3, -0.2, 0.9);
    expect(Number.isFinite(x + y + z)).toBe(true);
    const norm = Math.hypot(x, y, z);
    expect(norm).toBeCloseTo(Math.hypot(0.3, -0.2, 0.9), 12);
  });
});
