/** In-memory stand-in for the annotation service, driving the same wire shapes. */

import { FetchLike, QueueItem } from "../src/api";

export interface FakeOptions {
  attributes?: { name: string; classes: string[] }[];
  itemIds?: number[];
}

export class FakeService {
  attributes: { name: string; classes: string[] }[];
  queue: Map<number, { suggested: number[]; labels: number[] | null }>;
  iteration = 1;
  labeledTotal = 0;
  metrics: object[] = [];
  offline = false;
  advanceCalls = 0;

  constructor(options: FakeOptions = {}) {
    this.attributes = options.attributes ?? [
      { name: "brightness", classes: ["dark", "mid", "bright"] },
      { name: "texture", classes: ["smooth", "stripes", "checker"] },
      { name: "shape", classes: ["none", "circle", "square", "triangle"] },
    ];
    this.queue = new Map(
      (options.itemIds ?? [1, 2, 3]).map((id) => [
        id,
        { suggested: this.attributes.map(() => 0), labels: null },
      ]),
    );
  }

  queueItems(): QueueItem[] {
    return [...this.queue.entries()]
      .filter(([, v]) => v.labels === null)
      .map(([id, v]) => ({
        id,
        image_url: `/api/v1/image/${id}`,
        schema: { attributes: this.attributes },
        suggested: v.suggested,
        pending: true,
      }));
  }

  fetch: FetchLike = async (url, init) => {
    if (this.offline) throw new TypeError("fetch failed");
    const path = url.replace(/^https?:\/\/[^/]+/, "");
    if (path === "/api/v1/status") {
      const pending = this.queueItems().length;
      return jsonResponse({
        phase: pending ? "annotating" : "training",
        iteration: this.iteration,
        labeled: this.labeledTotal,
        pending,
        budget_remaining: 10,
        avg_accuracy: null,
        done: false,
      });
    }
    if (path === "/api/v1/queue") return jsonResponse(this.queueItems());
    if (path === "/api/v1/metrics") return jsonResponse(this.metrics);
    if (path === "/api/v1/advance") {
      this.advanceCalls += 1;
      return this.queueItems().length
        ? jsonResponse({ detail: "queue is not empty" }, 409)
        : jsonResponse({ ok: true });
    }
    if (path === "/api/v1/labels" && init?.method === "POST") {
      const body = JSON.parse(String(init.body));
      const item = this.queue.get(body.id);
      if (!item || item.labels !== null) {
        return jsonResponse({ detail: "not awaiting labels" }, 409);
      }
      if (!Array.isArray(body.labels) || body.labels.length !== this.attributes.length) {
        return jsonResponse({ detail: "bad labels" }, 400);
      }
      for (let m = 0; m < body.labels.length; m += 1) {
        const v = body.labels[m];
        if (v !== -1 && (v < 0 || v >= this.attributes[m].classes.length)) {
          return jsonResponse({ detail: "bad class" }, 400);
        }
      }
      item.labels = body.labels;
      this.labeledTotal += 1;
      return jsonResponse({ ok: true, id: body.id });
    }
    return jsonResponse({ detail: "not found" }, 404);
  };
}

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}
