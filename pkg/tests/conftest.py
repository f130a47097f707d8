import json

import pytest

# 12 labeled QA samples; questions and answers are >= 10 chars so that the
# cleaning rules keep them all.
CORPUS_SAMPLES = [
    {"question": "头痛好几天了应该怎么办", "answer": "建议充分休息并且多喝温水", "label_coarse": "内科", "label_fine": "神经内科", "age": 25, "gender": "F"},
    {"question": "发烧三十九度要去医院吗", "answer": "建议尽快物理降温观察体温", "label_coarse": "内科", "label_fine": "呼吸内科", "age": 34, "gender": "M"},
    {"question": "咳嗽两周了一直没有好转", "answer": "建议拍片检查并且注意保暖", "label_coarse": "内科", "label_fine": "呼吸内科", "age": 41, "gender": "F"},
    {"question": "胃痛反酸吃什么药比较好", "answer": "建议规律饮食避免辛辣刺激", "label_coarse": "内科", "label_fine": "消化内科", "age": 29, "gender": "M"},
    {"question": "腹泻不止浑身没力气咋办", "answer": "建议补充水分防止脱水症状", "label_coarse": "内科", "label_fine": "消化内科", "age": 52, "gender": "F"},
    {"question": "失眠多梦整夜睡不着怎么办", "answer": "建议规律作息避免睡前兴奋", "label_coarse": "内科", "label_fine": "神经内科", "age": 19, "gender": "F"},
    {"question": "腿部骨折手术后多久能走路", "answer": "一般需要三个月的恢复时间", "label_coarse": "骨科", "label_fine": "创伤骨科", "age": 33, "gender": "M"},
    {"question": "腰椎间盘突出需要手术治疗吗", "answer": "轻度突出可以先保守治疗看", "label_coarse": "骨科", "label_fine": "脊柱外科", "age": 45, "gender": "M"},
    {"question": "脚踝扭伤肿得厉害怎么处理", "answer": "建议冰敷制动抬高患肢休息", "label_coarse": "骨科", "label_fine": "创伤骨科", "age": 27, "gender": "F"},
    {"question": "肩膀疼抬不起来是肩周炎吗", "answer": "建议检查后进行康复训练等", "label_coarse": "骨科", "label_fine": "关节外科", "age": 56, "gender": "F"},
    {"question": "膝盖上下楼梯疼是什么原因", "answer": "可能是半月板损伤建议检查", "label_coarse": "骨科", "label_fine": "关节外科", "age": 61, "gender": "M"},
    {"question": "手腕骨裂打石膏要固定多久", "answer": "一般固定四到六周复查拍片", "label_coarse": "骨科", "label_fine": "创伤骨科", "age": 22, "gender": "M"},
]


def write_corpus(path, samples=CORPUS_SAMPLES):
    with open(path, "w", encoding="utf-8") as fh:
        for row in samples:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return path


@pytest.fixture()
def corpus_file(tmp_path):
    return write_corpus(tmp_path / "corpus.jsonl")
