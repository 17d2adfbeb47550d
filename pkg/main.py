import os
import sys
import logging
import argparse
from typing import List, Optional

from config_manager import ConfigManager, ConfigValidationError
from log_system import LogManager
from system_monitor import SystemMonitor
from field_data import DatasetFormatError, dataset_content_hash, read_dataset_header
from ajit_model import ModelConfigError
from experiment_runner import (ExperimentRunner, ProtocolMismatchError, TrainingDivergedError,
                               STUB_PERSISTENCE, generate_dataset)


EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

SUBCOMMANDS = ["generate-data", "train", "grid", "resolution", "bottleneck", "evaluate",
               "inspect-data", "show-config"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riftcast", description="自回归整流流扩散预报器实验工具")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", default="config.yml", help="配置文件 (YAML 或 JSON)")
    parser.add_argument("--seed", type=int, help="训练种子")
    parser.add_argument("--out", help="输出根目录; generate-data 时为数据集目录或 .rdset 文件")
    parser.add_argument("--data", help="数据集路径")
    parser.add_argument("--sampler", choices=["euler", "heun"])
    parser.add_argument("--ode-steps", type=int)
    parser.add_argument("--eps-cut", type=float)
    parser.add_argument("--target", choices=["x", "v", "eps"])
    parser.add_argument("--loss", choices=["x", "v", "eps"])
    parser.add_argument("--updates", type=int)
    parser.add_argument("--checkpoint", help="evaluate 使用的检查点")
    parser.add_argument("--grid", type=int, nargs=2, metavar=("H", "W"), help="generate-data 网格")
    parser.add_argument("--frames", type=int, help="generate-data 每条轨迹帧数")
    parser.add_argument("--thetas", type=float, nargs="+", help="generate-data 训练 θ")
    parser.add_argument("--seeds", type=int, nargs="+", help="generate-data 训练种子")
    parser.add_argument("--no-progress", action="store_true", help="关闭逐步训练日志")
    parser.add_argument("--mute", nargs="+", metavar="KEYWORD", help="屏蔽包含关键词的日志")
    parser.add_argument("--debug", action="store_true")
    return parser


class RiftcastApp:
    """riftcast 命令行程序"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self._setup_basic_logging()

        self.config_manager = ConfigManager(args.config)
        self.config_manager.apply_overrides(
            seed=args.seed, out=args.out, sampler=args.sampler, ode_steps=args.ode_steps,
            eps_cut=args.eps_cut, target=args.target, loss=args.loss, updates=args.updates,
            data=args.data, grid=args.grid, frames=args.frames, train_thetas=args.thetas,
            train_seeds=args.seeds, training_progress=False if args.no_progress else None,
            muted_keywords=args.mute
        )

        self.log_manager = LogManager(self.config_manager.get_log_dir())
        self.log_manager.setup_logging(args.debug or self.config_manager.is_debug_mode())
        self.log_manager.set_training_progress(self.config_manager.is_training_progress_enabled())
        for keyword in self.config_manager.get_muted_keywords():
            self.log_manager.mute_keyword(keyword)
        self.logger = logging.getLogger(__name__)
        self.monitor = SystemMonitor(self.logger)
        self.runner = ExperimentRunner(self.config_manager.get_experiment_config(), self.logger, self.monitor)

    def _setup_basic_logging(self):
        """设置基础日志, 用于配置加载阶段"""
        logging.basicConfig(
            level=logging.INFO,
            format='%(asctime)s - %(levelname)s - %(message)s',
            handlers=[logging.StreamHandler(sys.stdout)]
        )

    def run(self) -> int:
        handler = getattr(self, "cmd_" + self.args.subcommand.replace("-", "_"))
        self.logger.info("=" * 60)
        self.logger.info(f"riftcast {self.args.subcommand} (配置 {self.args.config})")
        self.logger.info("=" * 60)
        handler()
        self.logger.info("\n" + self.monitor.format_run_stats(self.monitor.snapshot()))
        return EXIT_OK

    # ============ 子命令 ============
    def dataset_output_path(self) -> str:
        """generate-data 的写出路径: --out 为 .rdset 文件时直接使用, 否则视为目录"""
        out = self.args.out
        if out is None:
            return self.config_manager.get_data_path()
        if out.endswith(".rdset"):
            return out
        return os.path.join(out, os.path.basename(self.config_manager.get_data_path()))

    def cmd_generate_data(self):
        cm = self.config_manager
        path = self.dataset_output_path()
        with self.monitor.phase("generate-data"):
            generate_dataset(
                path, cm.get_data_grid(), cm.get_data_frames(),
                cm.get_train_thetas(), cm.get_train_seeds(),
                cm.get_test_thetas(), cm.get_test_seeds(),
                cm.get_simulator_config(), self.logger
            )
        print(f"数据集已写入: {path}")

    def cmd_train(self):
        cfg = self.runner.config
        if cfg.training.stub_model == STUB_PERSISTENCE:
            self.logger.info("桩模型已启用, 跳过训练")
            return
        run_dir = self.runner.open_run(f"train-{cfg.cell_name}")
        with self.monitor.phase("train"):
            result = self.runner.train(run_dir=run_dir)
        self.runner.finish_run(run_dir)
        print(f"检查点: {result.checkpoint_path}")

    def cmd_grid(self):
        run_dir = self.runner.open_run("grid")
        with self.monitor.phase("grid"):
            cells = self.runner.run_target_loss_grid(run_dir=run_dir)
        self.runner.finish_run(run_dir)
        for (target, loss), cell in cells.items():
            print(f"target={target.value:<3} loss={loss.value:<3} mse={cell.mse:.6g} 发散={cell.divergence_count}")

    def cmd_resolution(self):
        run_dir = self.runner.open_run("resolution")
        with self.monitor.phase("resolution"):
            result = self.runner.run_resolution_protocol(run_dir=run_dir)
        self.runner.finish_run(run_dir)
        for row in result["rows"]:
            print(f"target={row['target']:<3} loss={row['loss']:<3} ratio={row['ratio']:.4g}")

    def cmd_bottleneck(self):
        run_dir = self.runner.open_run("bottleneck")
        with self.monitor.phase("bottleneck"):
            rows = self.runner.run_bottleneck_sweep(run_dir=run_dir)
        self.runner.finish_run(run_dir)
        for row in rows:
            print(f"{row['label']:<10} total_mse={row['total_mse']:.6g} 发散={row['divergence_count']}")

    def cmd_evaluate(self):
        cfg = self.runner.config
        if self.args.checkpoint is None and cfg.training.stub_model != STUB_PERSISTENCE:
            raise ConfigValidationError("evaluate 需要 --checkpoint")
        run_dir = self.runner.open_run(f"evaluate-{cfg.cell_name}")
        with self.monitor.phase("evaluate"):
            report = self.runner.evaluate(self.args.checkpoint, run_dir=run_dir)
        self.runner.finish_run(run_dir)
        print(f"滚动 MSE={report.aggregate_mse:.6g}, 发散 {report.divergence_count}/{report.rollout_count}")

    def cmd_inspect_data(self):
        path = self.config_manager.get_data_path()
        header, _ = read_dataset_header(path)
        entries = header["trajectories"]
        lines = ["=" * 60, f"数据集: {path}", "=" * 60]
        lines.append(f"  轨迹数: {header['count']}")
        lines.append(f"  形状: C={header['C']}, H={header['H']}, W={header['W']} ({header['dtype']})")
        lines.append(f"  帧数 T: {sorted({e['T'] for e in entries})}")
        lines.append(f"  dt: {sorted({e['dt'] for e in entries})}")
        lines.append(f"  θ: {[e['theta'] for e in entries]}")
        splits = {}
        for entry in entries:
            splits[entry['split']] = splits.get(entry['split'], 0) + 1
        lines.append(f"  split: {splits}")
        lines.append(f"  掩码: {sum(1 for e in entries if e['has_mask'])} 条")
        lines.append(f"  内容哈希: {dataset_content_hash(path)}")
        lines.append("=" * 60)
        print("\n".join(lines))

    def cmd_show_config(self):
        print(self.config_manager.get_config_status())
        print(self.log_manager.format_log_status())


def run(argv: Optional[List[str]] = None) -> int:
    """解析参数并执行子命令, 返回退出码"""
    args = build_parser().parse_args(argv)
    try:
        return RiftcastApp(args).run()
    except (ConfigValidationError, ModelConfigError, ProtocolMismatchError, DatasetFormatError) as e:
        logging.error(f"配置错误: {e}")
        return EXIT_CONFIG
    except TrainingDivergedError as e:
        logging.error(f"训练在第 {e.step} 步发散中止: {e}")
        return EXIT_DIVERGED
    except KeyboardInterrupt:
        logging.warning("收到中断信号, 已停止")
        return EXIT_ERROR
    except Exception as e:
        logging.error(f"程序运行出错: {e}", exc_info=True)
        return EXIT_ERROR


def main():
    """主函数"""
    print("=" * 50)
    print("  riftcast - 自回归整流流扩散预报器")
    print("=" * 50)
    sys.exit(run())


if __name__ == "__main__":
    main()
