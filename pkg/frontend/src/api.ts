/**
 * Typed client for the annotation service under /api/v1.
 *
 * Every response is parsed against a zod schema and every outgoing labels
 * payload is validated before it leaves, so a contract drift fails loudly
 * here instead of corrupting the annotation session.
 */

import { z } from "zod";

export const AttributeSchema = z.object({
  name: z.string(),
  classes: z.array(z.string()).min(2),
});

export const QueueItemSchema = z.object({
  id: z.number().int(),
  image_url: z.string(),
  schema: z.object({ attributes: z.array(AttributeSchema) }),
  suggested: z.array(z.number().int()),
  pending: z.boolean(),
});

export const StatusSchema = z.object({
  phase: z.string(),
  iteration: z.number().int(),
  labeled: z.number().int(),
  pending: z.number().int(),
  budget_remaining: z.number().int(),
  avg_accuracy: z.number().nullable(),
  done: z.boolean(),
});

export const MetricsRowSchema = z.object({
  phase: z.string(),
  cycle_or_iter: z.number().int(),
  task: z.string(),
  split: z.string(),
  accuracy: z.number().nullable(),
  labeled_count: z.number().int().nullable(),
}).passthrough();

export const LabelsPayloadSchema = z.object({
  id: z.number().int(),
  labels: z.array(z.number().int().min(-1)),
});

export type Attribute = z.infer<typeof AttributeSchema>;
export type QueueItem = z.infer<typeof QueueItemSchema>;
export type Status = z.infer<typeof StatusSchema>;
export type MetricsRow = z.infer<typeof MetricsRowSchema>;
export type LabelsPayload = z.infer<typeof LabelsPayloadSchema>;

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class AnnotationApi {
  constructor(
    private base: string = "",
    private fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async getJson(path: string): Promise<unknown> {
    const response = await this.fetchImpl(`${this.base}${path}`);
    if (!response.ok) {
      throw new ApiError(response.status, `GET ${path} -> ${response.status}`);
    }
    return response.json();
  }

  async status(): Promise<Status> {
    return StatusSchema.parse(await this.getJson("/api/v1/status"));
  }

  async queue(): Promise<QueueItem[]> {
    return z.array(QueueItemSchema).parse(await this.getJson("/api/v1/queue"));
  }

  async metrics(): Promise<MetricsRow[]> {
    return z.array(MetricsRowSchema).parse(await this.getJson("/api/v1/metrics"));
  }

  /** Validates the payload against the wire contract, then POSTs it. */
  async submitLabels(payload: LabelsPayload): Promise<void> {
    const body = LabelsPayloadSchema.parse(payload);
    const response = await this.fetchImpl(`${this.base}/api/v1/labels`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!response.ok) {
      throw new ApiError(response.status, `POST /api/v1/labels -> ${response.status}`);
    }
  }

  async advance(): Promise<boolean> {
    const response = await this.fetchImpl(`${this.base}/api/v1/advance`, {
      method: "POST",
    });
    if (response.status === 409) return false;
    if (!response.ok) {
      throw new ApiError(response.status, `POST /api/v1/advance -> ${response.status}`);
    }
    return true;
  }
}
